"""Dataclass configs and the tolerance constants used by tests and oracles."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields

# Numerical tolerances, defined once.
FD_STEP = 1e-5              # central finite-difference step (f64)
GRAD_REL_TOL = 1e-4         # max relative error, analytic vs finite differences
ROW_SUM_TOL = 1e-9          # softmax row sums
NORM_TOL = 1e-9             # unit-norm embeddings
EXACT_TOL = 1e-9            # residual forms, replay oracles
LN2_TOL = 1e-12             # multi-label BCE at zero logits
LAYER_NORM_EPS = 1e-5


@dataclass(frozen=True)
class ModelConfig:
    """Shapes and switches for the detection model.

    lambda1/lambda2 weight the object-token enhancement of object queries and
    decoder outputs; gamma1/gamma2 weight the action-query enhancement of the
    interaction stream. All four default to 1.0.
    """

    n_queries: int = 16
    channels: int = 64          # query / feature width
    text_dim: int = 32          # prompt embedding width
    image_size: int = 32
    patch_size: int = 8
    encoder_depth: int = 2
    decoder_depth: int = 2
    token_decoder_depth: int = 1
    text_layers: int = 3        # cross-modal refinement depth
    ffn_ratio: int = 4
    n_object_classes: int = 4
    n_verbs: int = 6
    lambda1: float = 1.0
    lambda2: float = 1.0
    gamma1: float = 1.0
    gamma2: float = 1.0
    use_action_queries: bool = True
    use_object_tokens: bool = True
    action_fusion: str = "sum"  # "sum" | "concat"
    nms_iou: float = 0.7
    min_box_extent: float = 1e-4
    attn_focus: float = 4.0     # initial slot-to-cell attention bias
    seed: int = 0

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ValueError("image_size must be divisible by patch_size")
        if self.action_fusion not in ("sum", "concat"):
            raise ValueError(f"unknown action_fusion {self.action_fusion!r}")
        for name in ("n_queries", "channels", "text_dim", "text_layers"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")


@dataclass(frozen=True)
class LossWeights:
    box: float = 5.0
    giou: float = 2.0
    cls: float = 1.0
    act: float = 1.0
    distill: float = 1.0


@dataclass(frozen=True)
class NoiseConfig:
    """Imperfection model for the stand-in detector producing pseudo-labels."""

    drop_prob: float = 0.0
    conf_base: float = 0.9
    conf_jitter: float = 0.0    # confidence ~ U(base - jitter, base + jitter)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 12
    lr: float = 1e-3
    batch_size: int = 4         # scenes per optimizer step (gradients sum)
    patience: int = 0           # 0 disables early stopping
    tau: float = 0.5            # pseudo-label confidence threshold
    rare_repeat: float = 0.0    # repeat-factor cap for scenes with rare
                                # categories (0 disables oversampling)
    weights: LossWeights = field(default_factory=LossWeights)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    template: str = "progressive"


def config_to_dict(cfg) -> dict:
    return asdict(cfg)


def model_config_from_dict(d: dict) -> ModelConfig:
    known = {f.name for f in fields(ModelConfig)}
    return ModelConfig(**{k: v for k, v in d.items() if k in known})


def train_config_from_dict(d: dict) -> TrainConfig:
    d = dict(d)
    if "weights" in d and isinstance(d["weights"], dict):
        d["weights"] = LossWeights(**d["weights"])
    if "noise" in d and isinstance(d["noise"], dict):
        d["noise"] = NoiseConfig(**d["noise"])
    known = {f.name for f in fields(TrainConfig)}
    return TrainConfig(**{k: v for k, v in d.items() if k in known})


def write_config_snapshot(path, **sections) -> None:
    """Dump the effective configuration of a run next to its outputs."""
    payload = {name: config_to_dict(cfg) if hasattr(cfg, "__dataclass_fields__") else cfg
               for name, cfg in sections.items()}
    with open(path, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")
