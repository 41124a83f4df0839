"""Training configuration, loss weights and ablation switches."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

ABLATIONS = ("dynamic-fusion", "multi-encoder", "multi-decoder", "adversarial", "shared-path")
PRESETS = {
    "none": (),
    "full": (),
    # single shared encoder-decoder, i.e. the mixed-data baseline
    "shared-only": ("dynamic-fusion", "multi-encoder", "multi-decoder", "adversarial"),
}


def parse_ablation(spec) -> tuple[str, ...]:
    """Normalize ``"multi-encoder,adversarial"`` / iterables / presets to a
    sorted tuple of ablation names."""
    if spec is None:
        return ()
    items = spec.split(",") if isinstance(spec, str) else list(spec)
    out = set()
    for raw in items:
        name = raw.strip().lower().replace("_", "-")
        if name.startswith("w/o-") or name.startswith("no-"):
            name = name.split("-", 1)[1]
        if not name:
            continue
        if name in PRESETS:
            out.update(PRESETS[name])
        elif name in ABLATIONS:
            out.add(name)
        else:
            raise ValueError(f"unknown ablation {raw.strip()!r}; choose from {', '.join(ABLATIONS + tuple(PRESETS))}")
    if "shared-path" in out and {"multi-encoder", "multi-decoder"} & out:
        raise ValueError("disabling the shared path needs both private encoders and decoders")
    if "shared-path" in out:
        out.add("adversarial")
    return tuple(sorted(out))


@dataclass
class LossWeights:
    gamma_b: float = 1.0
    gamma_m: float = 1.0
    gamma_a: float = 1.0
    gamma_g: float = 1.0
    gamma_v: float = 1.0
    gamma_l: float = 1.0

    def __post_init__(self):
        for f in dataclasses.fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"{f.name} must be non-negative")


@dataclass
class TrainConfig:
    batch_size: int = 16
    hidden: int = 128
    embedding: int = 128
    lr: float = 0.001
    dropout: float = 0.2
    teacher_forcing: float = 0.9
    hops: int = 3
    epochs: int = 300
    seed: int = 0
    ablation: tuple = ()
    precision: str = "float32"
    grl_lambda: float = 1.0
    clip: float = 10.0
    patience: int = 10
    eval_every: int = 1
    max_decode_len: int = 30
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        self.ablation = parse_ablation(self.ablation)
        for name in ("batch_size", "hidden", "embedding", "hops", "epochs", "max_decode_len", "eval_every"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if not 0.0 <= self.teacher_forcing <= 1.0:
            raise ValueError("teacher_forcing must lie in [0, 1]")
        if self.precision not in ("float32", "float64"):
            raise ValueError("precision must be float32 or float64")
        if self.patience < 0:
            raise ValueError("patience must be >= 0")

    # switches derived from the ablation set
    @property
    def multi_encoder(self) -> bool:
        return "multi-encoder" not in self.ablation

    @property
    def multi_decoder(self) -> bool:
        return "multi-decoder" not in self.ablation

    @property
    def dynamic_fusion(self) -> bool:
        return "dynamic-fusion" not in self.ablation

    @property
    def adversarial(self) -> bool:
        return "adversarial" not in self.ablation

    @property
    def shared_path(self) -> bool:
        return "shared-path" not in self.ablation

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["ablation"] = list(self.ablation)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        w = LossWeights(**d.pop("weights", {}))
        return cls(weights=w, **d)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)
