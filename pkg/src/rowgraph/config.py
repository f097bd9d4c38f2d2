"""Plain-text ``key=value`` run configuration."""
from __future__ import annotations

from dataclasses import dataclass, fields, replace

DEFAULT_CONFIG_TEXT = """\
# rowgraph run configuration (key=value, '#' starts a comment)

# KEM refinement stages; two stages gave the best plant detection on real imagery
stages=2
# channel multiplier for every layer; 1.0 is the full-size network
width_scale=1.0
# one shared trunk per stage (1) or one trunk per branch (0, full-size layout)
shared_trunk=0
# SGD learning rate, momentum and batch size of the reference training setup
lr=0.001
momentum=0.9
batch=4
# global gradient-norm clip applied before each SGD step (0 disables)
grad_clip=30
# epochs for the estimation module and for the edge head (reference setup: 100 and 50)
epochs_kem=100
epochs_ecm=50
# points sampled along each edge (best on real imagery: 16)
L=16
# peak threshold and minimum peak separation in image pixels
tau=0.15
delta=1
# negative:positive edge ratio and positive-edge cap per scene for edge-head training
neg_ratio=3
max_positive=48
# patch side in pixels and patch count for `generate`; split ratios train/val/test
patch_size=256
patches=564
split=0.6,0.2,0.2
# synthetic field preset: easy or hard
preset=easy
seed=0
"""


@dataclass(frozen=True)
class RunConfig:
    stages: int = 2
    width_scale: float = 1.0
    shared_trunk: int = 0
    lr: float = 0.001
    momentum: float = 0.9
    batch: int = 4
    grad_clip: float = 30.0
    epochs_kem: int = 100
    epochs_ecm: int = 50
    L: int = 16
    tau: float = 0.15
    delta: float = 1.0
    neg_ratio: float = 3.0
    max_positive: int = 48
    patch_size: int = 256
    patches: int = 564
    split: tuple = (0.6, 0.2, 0.2)
    preset: str = "easy"
    seed: int = 0

    def override(self, **kwargs) -> "RunConfig":
        return replace(self, **{k: v for k, v in kwargs.items() if v is not None})

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(repr(x) for x in v)
            lines.append(f"{f.name}={v}")
        return "\n".join(lines) + "\n"


def _coerce(name, raw):
    types = {f.name: f.type for f in fields(RunConfig)}
    if name not in types:
        raise KeyError(f"unknown config key {name!r}")
    kind = types[name]
    if kind == "int":
        return int(float(raw))
    if kind == "float":
        return float(raw)
    if kind == "tuple":
        return tuple(float(x) for x in raw.split(","))
    return raw.strip()


def parse_config(text: str) -> RunConfig:
    values = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {n}: expected key=value, got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        values[key] = _coerce(key, raw)
    return RunConfig(**values)


def load_config(path=None) -> RunConfig:
    if path is None:
        return parse_config(DEFAULT_CONFIG_TEXT)
    with open(path) as fh:
        return parse_config(fh.read())
