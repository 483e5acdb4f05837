"""The tracking network.

Two weight-shared convolutional streams embed the previous-frame and
current-frame crops; a 1x1 skip tap after every pooling stage preserves
high-resolution detail (tap channel count doubles as resolution halves).
The flattened taps and the final feature map of both streams are
concatenated (late fusion) and reduced by a fully-connected embedding.

The recurrent core is a two-layer peephole LSTM. It is "factored": the
visual embedding feeds both layers, the second layer additionally sees
the first layer's output. Gates:

    z = tanh(W_z x + R_z y' + b_z)
    i = sigmoid(W_i x + R_i y' + P_i c' + b_i)
    f = sigmoid(W_f x + R_f y' + P_f c' + b_f)
    c = i * z + f * c'
    o = sigmoid(W_o x + R_o y' + P_o c + b_o)
    y = o * tanh(c)

where y', c' are the previous step's output and cell and the peepholes
P are elementwise vectors. A linear head regresses the four corner
values in crop coordinates; it has no output nonlinearity because
corners of a partially-escaped object fall outside [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

GATES = ("z", "i", "f", "o")


@dataclass(frozen=True)
class NetworkConfig:
    crop_size: int = 48
    conv_blocks: tuple = ((5, 16), (3, 32), (3, 64))  # (kernel_size, out_channels)
    skip_channels: tuple = (4, 8, 16)
    embed_dim: int = 256
    lstm_units: int = 128
    seed: int = 0

    def __post_init__(self):
        if len(self.skip_channels) != len(self.conv_blocks):
            raise ValueError("one skip tap per conv block")
        for prev, cur in zip(self.skip_channels, self.skip_channels[1:]):
            if cur != 2 * prev:
                raise ValueError("skip channels must double block-to-block")
        for ksize, _ in self.conv_blocks:
            if ksize % 2 == 0:
                raise ValueError("odd kernel sizes only (same-padding)")

    @property
    def num_blocks(self) -> int:
        return len(self.conv_blocks)

    def block_resolutions(self) -> list[int]:
        """Spatial size of each block's pooled output."""
        res = []
        size = self.crop_size
        for _ in self.conv_blocks:
            if size % 2:
                raise ValueError(f"crop size {self.crop_size} not divisible "
                                 f"through {self.num_blocks} pooling stages")
            size //= 2
            res.append(size)
        return res

    def stream_feature_length(self) -> int:
        """Flattened per-stream length: all skip taps plus the final map."""
        res = self.block_resolutions()
        total = sum(r * r * c for r, c in zip(res, self.skip_channels))
        total += res[-1] ** 2 * self.conv_blocks[-1][1]
        return total


DESK_CONFIG = NetworkConfig()

# Full-scale reference values (227 px crops, 16/32/64 skip channels,
# 2048-unit embedding, 1024 LSTM units). Recorded for completeness; the
# desk config is the one meant to train on a CPU.
PAPER_SCALE_CONFIG = NetworkConfig(
    crop_size=227,
    conv_blocks=((11, 96), (5, 256), (3, 256)),
    skip_channels=(16, 32, 64),
    embed_dim=2048,
    lstm_units=1024,
)


def _uniform(rng, fan_in: int, shape, dtype) -> np.ndarray:
    # MSRA-style symmetric uniform, scaled by fan-in.
    limit = np.sqrt(6.0 / max(1, fan_in))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class LstmLayerParams:
    """Named views of one LSTM layer's tensors inside a parameter dict."""

    def __init__(self, tensors: dict[str, Tensor], prefix: str):
        self.W = {g: tensors[f"{prefix}.W{g}"] for g in GATES}
        self.R = {g: tensors[f"{prefix}.R{g}"] for g in GATES}
        self.P = {g: tensors[f"{prefix}.P{g}"] for g in ("i", "f", "o")}
        self.b = {g: tensors[f"{prefix}.b{g}"] for g in GATES}


class NetworkParams:
    """All learnable tensors, each registered once under a unique name."""

    def __init__(self, config: NetworkConfig, seed: int | None = None,
                 dtype=None):
        self.config = config
        dtype = dtype or ad.default_dtype()
        rng = np.random.default_rng(config.seed if seed is None else seed)
        t: dict[str, Tensor] = {}

        def param(name: str, data: np.ndarray) -> None:
            if name in t:
                raise ValueError(f"duplicate parameter name {name}")
            t[name] = Tensor(data, requires_grad=True, name=name, dtype=dtype)

        in_ch = 3
        for idx, (ksize, out_ch) in enumerate(config.conv_blocks):
            fan_in = in_ch * ksize * ksize
            param(f"conv{idx}.kernel", _uniform(rng, fan_in, (out_ch, in_ch, ksize, ksize), dtype))
            param(f"conv{idx}.bias", np.zeros(out_ch, dtype=dtype))
            param(f"conv{idx}.slope", np.full(out_ch, 0.25, dtype=dtype))
            sc = config.skip_channels[idx]
            param(f"skip{idx}.kernel", _uniform(rng, out_ch, (sc, out_ch, 1, 1), dtype))
            param(f"skip{idx}.bias", np.zeros(sc, dtype=dtype))
            param(f"skip{idx}.slope", np.full(sc, 0.25, dtype=dtype))
            in_ch = out_ch

        fused = 2 * config.stream_feature_length()
        param("embed.weight", _uniform(rng, fused, (fused, config.embed_dim), dtype))
        param("embed.bias", np.zeros(config.embed_dim, dtype=dtype))
        param("embed.slope", np.full(config.embed_dim, 0.25, dtype=dtype))

        units = config.lstm_units
        for layer, in_dim in ((0, config.embed_dim), (1, config.embed_dim + units)):
            for g in GATES:
                param(f"lstm{layer}.W{g}", _uniform(rng, in_dim, (in_dim, units), dtype))
                param(f"lstm{layer}.R{g}", _uniform(rng, units, (units, units), dtype))
                if g != "z":
                    param(f"lstm{layer}.P{g}", np.zeros(units, dtype=dtype))
                # Forget bias +1 so the cell remembers early in training.
                init = 1.0 if g == "f" else 0.0
                param(f"lstm{layer}.b{g}", np.full(units, init, dtype=dtype))

        param("head.weight", _uniform(rng, units, (units, 4), dtype))
        param("head.bias", np.zeros(4, dtype=dtype))

        self.tensors = t
        self.lstm_layers = (LstmLayerParams(t, "lstm0"), LstmLayerParams(t, "lstm1"))

    @property
    def dtype(self):
        return self.tensors["head.weight"].dtype

    def parameters(self) -> dict[str, Tensor]:
        return self.tensors

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.tensors.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        missing = set(self.tensors) - set(arrays)
        extra = set(arrays) - set(self.tensors)
        if missing or extra:
            raise ValueError(f"parameter name mismatch: missing={sorted(missing)} "
                             f"extra={sorted(extra)}")
        for name, arr in arrays.items():
            cur = self.tensors[name]
            if arr.shape != cur.data.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {cur.data.shape}")
            cur.data = arr.astype(cur.data.dtype)

    def zero_grad(self) -> None:
        for p in self.tensors.values():
            p.grad = None


@dataclass
class LstmState:
    """Per-layer (output, cell) pairs; a fresh state is all zeros."""
    layers: tuple  # ((y0, c0), (y1, c1)) as Tensors [N, units]

    @classmethod
    def zeros(cls, config: NetworkConfig, batch: int = 1, dtype=None) -> "LstmState":
        dtype = dtype or ad.default_dtype()
        mk = lambda: Tensor(np.zeros((batch, config.lstm_units)), dtype=dtype)
        return cls(layers=((mk(), mk()), (mk(), mk())))

    def detached(self) -> "LstmState":
        """Copy with plain data tensors (drops any graph connectivity)."""
        return LstmState(layers=tuple(
            (Tensor(y.data.copy(), dtype=y.data.dtype),
             Tensor(c.data.copy(), dtype=c.data.dtype))
            for y, c in self.layers))


def _stream_features(params: NetworkParams, x: Tensor) -> Tensor:
    """Conv pipeline of one (batched) stream -> flattened feature matrix."""
    t = params.tensors
    parts = []
    for idx in range(params.config.num_blocks):
        ksize = params.config.conv_blocks[idx][0]
        x = ad.conv2d(x, t[f"conv{idx}.kernel"], t[f"conv{idx}.bias"],
                      stride=1, pad=ksize // 2)
        x = ad.prelu(x, t[f"conv{idx}.slope"])
        x = ad.maxpool2x2(x)
        tap = ad.conv2d(x, t[f"skip{idx}.kernel"], t[f"skip{idx}.bias"])
        tap = ad.prelu(tap, t[f"skip{idx}.slope"])
        parts.append(ad.flatten(tap))
    parts.append(ad.flatten(x))
    return ad.concat(parts, axis=1)


def embed_crop_pair(params: NetworkParams, crop_prev: Tensor,
                    crop_cur: Tensor) -> Tensor:
    """Embed a batch of crop pairs -> [N, embed_dim].

    Both streams share weights, so they run as one doubled batch; the
    per-stream features are then concatenated positionally (previous
    first), which is why swapping the crops changes the embedding.
    """
    crop_prev, crop_cur = ad.as_tensor(crop_prev), ad.as_tensor(crop_cur)
    if crop_prev.data.shape != crop_cur.data.shape:
        raise ad.ShapeError("crop pair shapes differ")
    if crop_prev.data.ndim == 3:
        crop_prev = ad.reshape(crop_prev, (1,) + crop_prev.data.shape)
        crop_cur = ad.reshape(crop_cur, (1,) + crop_cur.data.shape)
    n = crop_prev.data.shape[0]
    both = ad.concat([crop_prev, crop_cur], axis=0)
    feats = _stream_features(params, both)
    fused = ad.concat([_rows(feats, 0, n), _rows(feats, n, 2 * n)], axis=1)
    t = params.tensors
    emb = ad.fully_connected(fused, t["embed.weight"], t["embed.bias"])
    return ad.prelu(emb, t["embed.slope"])


def _rows(x: Tensor, lo: int, hi: int) -> Tensor:
    """Row slice [lo:hi] of a matrix, differentiable."""
    out = ad._make_out(x.data[lo:hi], x)

    def backward(g):
        if x.requires_grad:
            full = np.zeros_like(x.data)
            full[lo:hi] = g
            x.accumulate_grad(full)

    ad._record(out, backward)
    return out


def lstm_step(layer: LstmLayerParams, x: Tensor, prev: tuple) -> tuple:
    """One recurrent step of a single layer; returns (y, c)."""
    y_prev, c_prev = prev
    pre = {g: ad.add(ad.matmul(x, layer.W[g]),
                     ad.add(ad.matmul(y_prev, layer.R[g]), layer.b[g]))
           for g in GATES}
    z = ad.tanh(pre["z"])
    i = ad.sigmoid(ad.add(pre["i"], ad.mul(c_prev, layer.P["i"])))
    f = ad.sigmoid(ad.add(pre["f"], ad.mul(c_prev, layer.P["f"])))
    c = ad.add(ad.mul(i, z), ad.mul(f, c_prev))
    o = ad.sigmoid(ad.add(pre["o"], ad.mul(c, layer.P["o"])))
    y = ad.mul(o, ad.tanh(c))
    return y, c


def forward_step(params: NetworkParams, crop_prev, crop_cur,
                 state: LstmState) -> tuple:
    """Full network step: crop pair -> (pred [N,4], next LstmState).

    The embedding feeds layer 0 directly and layer 1 concatenated with
    layer 0's output (the factored feed).
    """
    feat = embed_crop_pair(params, crop_prev, crop_cur)
    y0, c0 = lstm_step(params.lstm_layers[0], feat, state.layers[0])
    x1 = ad.concat([feat, y0], axis=1)
    y1, c1 = lstm_step(params.lstm_layers[1], x1, state.layers[1])
    t = params.tensors
    pred = ad.fully_connected(y1, t["head.weight"], t["head.bias"])
    return pred, LstmState(layers=((y0, c0), (y1, c1)))


# ---------------------------------------------------------------------------
# checkpoint glue: config metadata rides along as ordinary named tensors,
# so a checkpoint alone is enough to rebuild the network.

_META_KEYS = ("meta.crop_size", "meta.conv_blocks", "meta.skip_channels",
              "meta.embed_dim", "meta.lstm_units")


def save_params(path, params: NetworkParams) -> None:
    from .checkpoint import save_checkpoint
    cfg = params.config
    arrays = {
        "meta.crop_size": np.array([cfg.crop_size], dtype=np.float64),
        "meta.conv_blocks": np.array(cfg.conv_blocks, dtype=np.float64),
        "meta.skip_channels": np.array(cfg.skip_channels, dtype=np.float64),
        "meta.embed_dim": np.array([cfg.embed_dim], dtype=np.float64),
        "meta.lstm_units": np.array([cfg.lstm_units], dtype=np.float64),
    }
    arrays.update(params.arrays())
    save_checkpoint(path, arrays)


def load_params(path, dtype=None) -> NetworkParams:
    from .checkpoint import CheckpointError, load_checkpoint
    arrays = load_checkpoint(path)
    missing = [k for k in _META_KEYS if k not in arrays]
    if missing:
        raise CheckpointError(f"{path}: missing metadata {missing}")
    cfg = NetworkConfig(
        crop_size=int(arrays["meta.crop_size"][0]),
        conv_blocks=tuple(tuple(int(v) for v in row)
                          for row in arrays["meta.conv_blocks"]),
        skip_channels=tuple(int(v) for v in arrays["meta.skip_channels"]),
        embed_dim=int(arrays["meta.embed_dim"][0]),
        lstm_units=int(arrays["meta.lstm_units"][0]),
    )
    weights = {k: v for k, v in arrays.items() if not k.startswith("meta.")}
    sample = next(iter(weights.values()))
    params = NetworkParams(cfg, dtype=dtype or sample.dtype)
    params.load_arrays(weights)
    return params


def unrolled_loss(params: NetworkParams, steps, state: LstmState | None = None):
    """Mean per-step L1 loss over an unrolled sequence.

    ``steps`` yields (crop_prev, crop_cur, target[N,4]) per timestep; the
    recurrent state threads through so one backward pass differentiates
    all steps.
    """
    steps = list(steps)
    if not steps:
        raise ValueError("unrolled_loss: empty sequence")
    first = ad.as_tensor(steps[0][0])
    batch = first.data.shape[0] if first.data.ndim == 4 else 1
    if state is None:
        state = LstmState.zeros(params.config, batch, dtype=params.dtype)
    losses = []
    for crop_prev, crop_cur, target in steps:
        pred, state = forward_step(params, crop_prev, crop_cur, state)
        losses.append(ad.l1_loss(pred, ad.as_tensor(target)))
    return ad.mean_of(losses), state
