"""Streaming inference.

Initialize from one frame and one box; each later frame costs a single
forward pass. The recurrent state is restored to the first forward
pass's output every ``reset_interval`` steps (default 32, the maximum
training unroll): the snapshot keeps an encoding of the tracked object
while preventing the state from drifting past anything seen in
training.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor
from .geometry import (BoundingBox, crop_window_for, decode_prediction,
                       extract_crop)
from .network import LstmState, NetworkParams, forward_step

DEFAULT_RESET_INTERVAL = 32


@dataclass
class TrackerState:
    lstm: LstmState
    snapshot: LstmState          # first forward pass's state, never overwritten
    prev_box: BoundingBox
    prev_frame: np.ndarray
    frames_since_reset: int = 0
    flagged_frames: list = field(default_factory=list)


class Tracker:
    """One tracked object in one video stream.

    Parameters are read-only and may be shared between instances;
    all mutable state lives in the per-instance TrackerState.
    """

    def __init__(self, params: NetworkParams,
                 reset_interval: int = DEFAULT_RESET_INTERVAL):
        if reset_interval < 0:
            raise ValueError("reset_interval must be >= 0 (0 disables)")
        self.params = params
        self.reset_interval = reset_interval
        self.state: TrackerState | None = None

    @property
    def crop_size(self) -> int:
        return self.params.config.crop_size

    def init(self, frame: np.ndarray, box: BoundingBox) -> TrackerState:
        """First forward pass on the (frame, frame) pair from a zero state."""
        dtype = self.params.dtype
        window = crop_window_for(box)
        crop = extract_crop(frame, window, self.crop_size, dtype)[None]
        zero = LstmState.zeros(self.params.config, 1, dtype=dtype)
        _, lstm = forward_step(self.params, Tensor(crop, dtype=dtype),
                               Tensor(crop, dtype=dtype), zero)
        lstm = lstm.detached()
        self.state = TrackerState(lstm=lstm, snapshot=lstm.detached(),
                                  prev_box=box, prev_frame=frame)
        return self.state

    def step(self, frame: np.ndarray) -> BoundingBox:
        """Consume one frame, emit one box."""
        st = self.state
        if st is None:
            raise RuntimeError("tracker not initialized")
        dtype = self.params.dtype
        window = crop_window_for(st.prev_box)
        crop_prev = extract_crop(st.prev_frame, window, self.crop_size, dtype)[None]
        crop_cur = extract_crop(frame, window, self.crop_size, dtype)[None]
        pred, lstm = forward_step(self.params, Tensor(crop_prev, dtype=dtype),
                                  Tensor(crop_cur, dtype=dtype), st.lstm)

        if not np.all(np.isfinite(pred.data)):
            # Hold the last box rather than emit garbage; the frame is
            # flagged so callers can see it happened.
            st.flagged_frames.append(st.frames_since_reset)
            st.prev_frame = frame
            return st.prev_box

        box = decode_prediction(window, pred.data[0])
        st.lstm = lstm.detached()
        st.prev_box = box
        st.prev_frame = frame
        st.frames_since_reset += 1
        if self.reset_interval and st.frames_since_reset >= self.reset_interval:
            st.lstm = st.snapshot.detached()
            st.frames_since_reset = 0
        return box


def track_sequence(params: NetworkParams, frames, init_box: BoundingBox,
                   reset_interval: int = DEFAULT_RESET_INTERVAL) -> list:
    """Track through a frame list; returns len(frames) - 1 boxes."""
    frames = list(frames)
    if len(frames) < 2:
        raise ValueError("need at least 2 frames to track")
    tracker = Tracker(params, reset_interval=reset_interval)
    tracker.init(frames[0], init_box)
    return [tracker.step(f) for f in frames[1:]]
