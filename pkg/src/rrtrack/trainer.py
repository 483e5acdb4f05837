"""Curriculum training loop.

The unroll schedule starts short and doubles while the mini-batch
halves, keeping unroll*batch = 128 examples per iteration:

    (2, 64, 0.00) -> (4, 32, 0.25) -> (8, 16, 0.50)
                  -> (16, 8, 0.75) -> (32, 4, 0.75)

The third number is the probability that a training sequence places its
crop windows from the network's own decoded predictions instead of the
ground truth ("learning to fix mistakes"). That decision is made once
per sequence, never per step. Stages advance when the windowed loss
plateaus or the stage hits its iteration cap; Adam moments survive the
transition.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, Graph, Tensor
from .geometry import (crop_window_for, decode_prediction, encode_target,
                       extract_crop, mirror_track)
from .network import (LstmState, NetworkConfig, NetworkParams, forward_step,
                      save_params)
from .synthgen import SequenceConfig, SyntheticSequence, generate_sequence, load_sequence


@dataclass(frozen=True)
class CurriculumStage:
    unroll: int
    batch: int
    p_self: float


CURRICULUM: tuple = (
    CurriculumStage(2, 64, 0.0),
    CurriculumStage(4, 32, 0.25),
    CurriculumStage(8, 16, 0.5),
    CurriculumStage(16, 8, 0.75),
    CurriculumStage(32, 4, 0.75),
)

GROUND_TRUTH = "ground_truth"
PREDICTED = "predicted"


def select_crop_source(p_self: float, rng: np.random.Generator) -> str:
    """One Bernoulli draw deciding the crop source for a whole sequence."""
    if not 0.0 <= p_self <= 1.0:
        raise ValueError(f"p_self must be in [0,1], got {p_self}")
    return PREDICTED if rng.random() < p_self else GROUND_TRUTH


def plateau_detect(history, window: int = 500, min_improvement: float = 0.01,
                   max_iters: int | None = None) -> bool:
    """True when the windowed mean stopped improving (or the cap is hit).

    Compares the mean of the last ``window`` losses against the window
    before it; relative improvement below ``min_improvement`` counts as
    a plateau. Needs two full windows of history to fire.
    """
    n = len(history)
    if max_iters is not None and n >= max_iters:
        return True
    if n < 2 * window:
        return False
    prev = float(np.mean(history[n - 2 * window:n - window]))
    cur = float(np.mean(history[n - window:]))
    if prev <= 0.0:
        return True
    return (prev - cur) / prev < min_improvement


@dataclass
class TrainState:
    params: NetworkParams
    adam: Adam
    stage_index: int = 0
    iteration: int = 0
    stage_losses: list = field(default_factory=list)

    @property
    def stage(self) -> CurriculumStage:
        return CURRICULUM[self.stage_index]


def advance_stage(state: TrainState) -> TrainState:
    """Move to the next curriculum stage; no-op at the final stage.

    Adam moments are deliberately preserved across the transition.
    """
    if state.stage_index < len(CURRICULUM) - 1:
        state.stage_index += 1
        state.stage_losses = []
    return state


# ---------------------------------------------------------------------------
# sequence -> training steps


def build_training_sequence(seq: SyntheticSequence, unroll: int, mode: str,
                            params: NetworkParams | None = None,
                            crop_size: int | None = None,
                            dtype=None, predict_fn=None):
    """Materialize one sequence as (crop_prev, crop_cur, target) steps.

    At step t the crop window comes from the box at t-1: the ground
    truth, or (in predicted mode) the network's decoded output from the
    previous step. Crop pairs sample the same window in frames t-1 and
    t; targets are the truth at t encoded in that window. The first
    window always uses the given initial box.
    """
    if mode not in (GROUND_TRUTH, PREDICTED):
        raise ValueError(f"unknown crop-source mode {mode!r}")
    if len(seq) < unroll + 1:
        raise ValueError(f"sequence of {len(seq)} frames too short for "
                         f"unroll {unroll}")
    if mode == PREDICTED and params is None and predict_fn is None:
        raise ValueError("predicted mode needs params or a predict_fn")
    if crop_size is None:
        crop_size = params.config.crop_size if params else 48
    dtype = dtype or ad.default_dtype()

    state = None
    if predict_fn is None and mode == PREDICTED:
        state = LstmState.zeros(params.config, 1, dtype=params.dtype)

    steps = []
    prev_box = seq.truth[0]
    for t in range(1, unroll + 1):
        window = crop_window_for(prev_box)
        crop_prev = extract_crop(seq.frames[t - 1], window, crop_size, dtype)
        crop_cur = extract_crop(seq.frames[t], window, crop_size, dtype)
        target = encode_target(window, seq.truth[t]).as_array()
        steps.append((crop_prev, crop_cur, target))
        if mode == GROUND_TRUTH:
            prev_box = seq.truth[t]
        elif predict_fn is not None:
            prev_box = decode_prediction(window, predict_fn(crop_prev, crop_cur, t))
        else:
            pred, state = forward_step(params, Tensor(crop_prev, dtype=dtype),
                                       Tensor(crop_cur, dtype=dtype), state)
            prev_box = decode_prediction(window, pred.data[0])
    return steps


def _batched_unroll_loss(params: NetworkParams, seqs, modes, dtype):
    """Loss over a batch of sequences stepped together in time.

    Sequences in predicted mode place their next window from the decoded
    network output; the window choice itself is data, not part of the
    differentiated graph.
    """
    crop_size = params.config.crop_size
    batch = len(seqs)
    unroll = len(seqs[0]) - 1
    state = LstmState.zeros(params.config, batch, dtype=params.dtype)
    prev_boxes = [s.truth[0] for s in seqs]
    losses = []
    for t in range(1, unroll + 1):
        windows = [crop_window_for(b) for b in prev_boxes]
        prevs = np.stack([extract_crop(s.frames[t - 1], w, crop_size, dtype)
                          for s, w in zip(seqs, windows)])
        curs = np.stack([extract_crop(s.frames[t], w, crop_size, dtype)
                         for s, w in zip(seqs, windows)])
        targets = np.stack([encode_target(w, s.truth[t]).as_array()
                            for s, w in zip(seqs, windows)]).astype(dtype)
        pred, state = forward_step(params, Tensor(prevs, dtype=dtype),
                                   Tensor(curs, dtype=dtype), state)
        losses.append(ad.l1_loss(pred, Tensor(targets, dtype=dtype)))
        for j in range(batch):
            if modes[j] == GROUND_TRUTH:
                prev_boxes[j] = seqs[j].truth[t]
            else:
                prev_boxes[j] = decode_prediction(windows[j], pred.data[j])
    return ad.mean_of(losses)


# ---------------------------------------------------------------------------
# data sources


class SyntheticSource:
    """Endless generator of training sequences, deterministic per slot.

    The sequence used at (iteration, batch slot) depends only on the
    base seed and those indices, so runs replay identically.
    """

    def __init__(self, seq_config: SequenceConfig, base_seed: int = 0):
        self.seq_config = seq_config
        self.base_seed = base_seed

    def sample(self, iteration: int, slot: int, length: int) -> SyntheticSequence:
        seed = int(np.random.SeedSequence(
            entropy=self.base_seed, spawn_key=(iteration, slot)).generate_state(1)[0])
        return generate_sequence(self.seq_config, length, seed)


class DirectorySource:
    """Cycles exported sequence directories (see synthgen export format)."""

    def __init__(self, root: Path):
        root = Path(root)
        dirs = sorted(d for d in root.iterdir()
                      if d.is_dir() and (d / "annotations.txt").is_file())
        if not dirs:
            raise FileNotFoundError(f"no sequence directories under {root}")
        self._sequences = [load_sequence(d) for d in dirs]

    def sample(self, iteration: int, slot: int, length: int) -> SyntheticSequence:
        idx = (iteration * 131 + slot) % len(self._sequences)
        seq = self._sequences[idx]
        if len(seq) < length:
            raise ValueError(f"sequence {idx} has {len(seq)} frames, "
                             f"need {length}")
        start = int(np.random.SeedSequence(
            entropy=idx, spawn_key=(iteration, slot)).generate_state(1)[0]
            % (len(seq) - length + 1))
        return SyntheticSequence(frames=seq.frames[start:start + length],
                                 truth=seq.truth[start:start + length],
                                 occluded=seq.occluded[start:start + length],
                                 seed=seq.seed)


# ---------------------------------------------------------------------------
# the training loop


@dataclass(frozen=True)
class TrainSettings:
    net_config: NetworkConfig = NetworkConfig()
    seed: int = 0
    dtype: str = "float32"
    lr: float = 1e-3
    lr_drop_fraction: float = 0.2
    lr_drop_factor: float = 0.1
    mirror_prob: float = 0.5
    plateau_window: int = 500
    plateau_threshold: float = 0.01
    stage_max_iters: int = 20000
    checkpoint_every: int = 2000
    disable_self_crops: bool = False  # ablation: p_self = 0 at every stage

    def numpy_dtype(self):
        return np.float64 if self.dtype == "float64" else np.float32


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainResult:
    state: TrainState
    loss_rows: list
    checkpoint_paths: list
    log_path: Path | None


LOG_HEADER = "iteration,stage,unroll,batch,p_self,lr,loss"


def learning_rate(settings: TrainSettings, iteration: int, total: int) -> float:
    if total > 0 and iteration > settings.lr_drop_fraction * total:
        return settings.lr * settings.lr_drop_factor
    return settings.lr


def train(settings: TrainSettings, source, iterations: int,
          out_dir: Path | None = None, params: NetworkParams | None = None,
          progress=None) -> TrainResult:
    """Run the curriculum for ``iterations`` and checkpoint along the way.

    Fully reproducible: (settings, source seed, iterations) fixes the
    loss log and every checkpoint byte. A non-finite loss aborts with a
    diagnostic checkpoint.
    """
    dtype = settings.numpy_dtype()
    if params is None:
        params = NetworkParams(settings.net_config, seed=settings.seed, dtype=dtype)
    state = TrainState(params=params, adam=Adam(params.parameters(), lr=settings.lr))
    rng_aux = np.random.default_rng(np.random.SeedSequence(
        entropy=settings.seed, spawn_key=(0xA0F,)))

    out_dir = Path(out_dir) if out_dir is not None else None
    ckpt_paths = []
    log_path = None
    log_file = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        ckpt_paths.append(_save(out_dir, 0, params))
        log_path = out_dir / "loss.csv"
        log_file = open(log_path, "w")
        log_file.write(LOG_HEADER + "\n")

    rows = []
    try:
        start = time.perf_counter()
        for it in range(1, iterations + 1):
            stage = state.stage
            p_self = 0.0 if settings.disable_self_crops else stage.p_self
            seqs = []
            modes = []
            for slot in range(stage.batch):
                seq = source.sample(it, slot, stage.unroll + 1)
                if rng_aux.random() < settings.mirror_prob:
                    frames, boxes = mirror_track(seq.frames, seq.truth)
                    seq = SyntheticSequence(frames=frames, truth=boxes,
                                            occluded=seq.occluded, seed=seq.seed)
                seqs.append(seq)
                modes.append(select_crop_source(p_self, rng_aux))

            params.zero_grad()
            with Graph() as g:
                loss = _batched_unroll_loss(params, seqs, modes, dtype)
            loss_val = float(loss.data)
            if not np.isfinite(loss_val):
                if out_dir is not None:
                    _save(out_dir, it, params, prefix="ckpt_diag")
                raise TrainingDiverged(f"non-finite loss at iteration {it}")
            g.backward(loss)
            lr = learning_rate(settings, it, iterations)
            state.adam.step(lr=lr)

            state.iteration = it
            state.stage_losses.append(loss_val)
            row = (it, state.stage_index, stage.unroll, stage.batch, p_self,
                   lr, loss_val)
            rows.append(row)
            if log_file is not None:
                log_file.write(",".join(repr(v) if isinstance(v, float) else str(v)
                                        for v in row) + "\n")
                log_file.flush()
            if progress is not None and (it % 50 == 0 or it == iterations):
                progress(it, iterations, loss_val, time.perf_counter() - start)

            if plateau_detect(state.stage_losses, settings.plateau_window,
                              settings.plateau_threshold,
                              max_iters=settings.stage_max_iters):
                advance_stage(state)
            if out_dir is not None and settings.checkpoint_every > 0 \
                    and it % settings.checkpoint_every == 0:
                ckpt_paths.append(_save(out_dir, it, params))
    finally:
        if log_file is not None:
            log_file.close()

    if out_dir is not None and iterations > 0 and (
            settings.checkpoint_every <= 0 or iterations % settings.checkpoint_every):
        ckpt_paths.append(_save(out_dir, iterations, params))
    return TrainResult(state=state, loss_rows=rows, checkpoint_paths=ckpt_paths,
                       log_path=log_path)


def _save(out_dir: Path, iteration: int, params: NetworkParams,
          prefix: str = "ckpt") -> Path:
    path = out_dir / f"{prefix}_{iteration}.re3"
    save_params(path, params)
    return path


def settings_from_config(cfg: dict) -> TrainSettings:
    from .config import parse_blocks, parse_int_list
    net = NetworkConfig(
        crop_size=cfg["network.crop_size"],
        conv_blocks=parse_blocks(cfg["network.blocks"]),
        skip_channels=parse_int_list(cfg["network.skip_channels"]),
        embed_dim=cfg["network.embed_dim"],
        lstm_units=cfg["network.lstm_units"],
        seed=cfg["seed"],
    )
    return TrainSettings(
        net_config=net,
        seed=cfg["seed"],
        dtype=cfg["train.dtype"],
        lr=cfg["train.lr"],
        lr_drop_fraction=cfg["train.lr_drop_fraction"],
        lr_drop_factor=cfg["train.lr_drop_factor"],
        mirror_prob=cfg["train.mirror_prob"],
        plateau_window=cfg["train.plateau_window"],
        plateau_threshold=cfg["train.plateau_threshold"],
        stage_max_iters=cfg["train.stage_max_iters"],
        checkpoint_every=cfg["train.checkpoint_every"],
    )


def sequence_config_from(cfg: dict) -> SequenceConfig:
    from .synthgen import MotionParams, PatchSource
    source = PatchSource(
        mode="image-directory" if cfg["synth.image_dir"] else "procedural",
        min_area_fraction=cfg["synth.min_area_fraction"],
        image_dir=Path(cfg["synth.image_dir"]) if cfg["synth.image_dir"] else None,
        frame_size=cfg["synth.frame_size"],
    )
    motion = MotionParams(
        speed_init_max=cfg["synth.speed_init_max"],
        sigma_speed=cfg["synth.sigma_speed"],
        sigma_dir=cfg["synth.sigma_dir"],
        sigma_aspect=cfg["synth.sigma_aspect"],
        sigma_scale=cfg["synth.sigma_scale"],
    )
    return SequenceConfig(
        source=source, motion=motion,
        occluders_min=cfg["synth.occluders_min"],
        occluders_max=cfg["synth.occluders_max"],
        occlusion_threshold=cfg["synth.occlusion_threshold"],
    )
