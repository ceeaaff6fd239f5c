"""Run configuration shared by every command.

One flat dataclass covers scene generation, predictor noise, windowing, and
alignment. Precedence when assembling a run: built-in defaults, then keys from
a JSON config file, then explicit command-line flags. Unknown keys are
rejected rather than ignored so typos fail loudly.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .alignment import AlignmentOptions
from .scenes import SceneConfig


@dataclass
class RunConfig:
    # scene generation
    seed: int = 0
    frame_count: int = 6
    height: int = 24
    width: int = 32
    object_count: int = 2
    motion_magnitude: float = 0.05
    camera_path: str = "orbit"
    camera_magnitude: float = 0.02
    track_count: int = 16
    # predictor corruption: per-point sigma (depth-proportional) and
    # per-pair log-scale sigma
    noise: float = 0.0
    jitter: float = 0.0
    # sliding-window inference
    window: int = 12
    overlap: int = 4
    # global alignment
    stride: int = 5
    lambda_2d: float = 0.01
    use_dynamic_mask: bool = True
    max_iters: int = 200
    tol: float = 1e-6

    def __post_init__(self):
        if self.noise < 0 or self.jitter < 0:
            raise ValueError("noise and jitter must be >= 0")
        if self.window < 1:
            raise ValueError("window must be >= 1")
        if self.overlap < 0:
            raise ValueError("overlap must be >= 0")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")
        if self.lambda_2d < 0:
            raise ValueError("lambda_2d must be >= 0")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        self.scene_config()  # reuse the scene validation for its fields

    def scene_config(self) -> SceneConfig:
        return SceneConfig(
            seed=self.seed,
            frame_count=self.frame_count,
            height=self.height,
            width=self.width,
            object_count=self.object_count,
            motion_magnitude=self.motion_magnitude,
            camera_path=self.camera_path,
            camera_magnitude=self.camera_magnitude,
            track_count=self.track_count,
        )

    def alignment_options(self) -> AlignmentOptions:
        return AlignmentOptions(
            max_iters=self.max_iters,
            tol=self.tol,
            lambda_2d=self.lambda_2d,
            use_dynamic_mask=self.use_dynamic_mask,
        )

    def effective_window(self) -> tuple[int, int]:
        """Window/overlap actually fed to the sliding-window code.

        window=1 means the chained pairwise baseline; a pair needs two frames,
        so it maps to the smallest real window and the overlap is clamped.
        """
        t = max(self.window, 2)
        return t, min(self.overlap, t - 1)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        if not isinstance(data, dict):
            raise ValueError("config must be a JSON object")
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(data) - set(known))
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(unknown)}")
        coerced = {}
        for name, value in data.items():
            kind = known[name].type
            if kind == "int":
                if isinstance(value, bool) or not isinstance(value, int):
                    raise ValueError(f"config key {name} must be an integer")
            elif kind == "float":
                if isinstance(value, bool) or not isinstance(value, (int, float)):
                    raise ValueError(f"config key {name} must be a number")
                value = float(value)
            elif kind == "bool":
                if not isinstance(value, bool):
                    raise ValueError(f"config key {name} must be a boolean")
            elif kind == "str":
                if not isinstance(value, str):
                    raise ValueError(f"config key {name} must be a string")
            coerced[name] = value
        return cls(**coerced)

    def updated(self, overrides: dict) -> "RunConfig":
        """New config with overrides applied on top (flag precedence)."""
        merged = asdict(self)
        merged.update(overrides)
        return self.from_dict(merged)


def load_config_file(path) -> dict:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"config file {path} is not valid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise ValueError(f"config file {path} must hold a JSON object")
    return data


def build_config(config_path=None, flag_overrides: dict | None = None) -> RunConfig:
    """defaults < config file < flags."""
    cfg = RunConfig()
    if config_path is not None:
        cfg = cfg.updated(load_config_file(config_path))
    if flag_overrides:
        cfg = cfg.updated(flag_overrides)
    return cfg
