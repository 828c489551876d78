"""Object-aware query initialization via distillation.

Learnable, image-independent projection tokens cross-attend to the encoded
image; a pooled two-layer head predicts which object classes are present and
is supervised with pseudo-labels taken from a stand-in detector's confident
detections. The tokens themselves enhance the object queries and the instance
decoder's object outputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tt
from .blocks import DecoderBlockParams, decoder_block
from .errors import ValidationError
from .tensor import Tensor

HEAD_HIDDEN = 128
DEFAULT_NUM_OBJECT_CLASSES = 80


@dataclass(frozen=True)
class ClassHead:
    w1: Tensor      # channels -> HEAD_HIDDEN
    b1: Tensor
    w2: Tensor      # HEAD_HIDDEN -> n_classes
    b2: Tensor


@dataclass(frozen=True)
class PseudoLabels:
    y: np.ndarray   # {0,1} per class
    tau: float


def decode_object_tokens(tokens: Tensor, memory: Tensor, blocks,
                         mem_pos=None) -> Tensor:
    """Run the projection tokens through the token decoder stack; the token
    values double as their own attention position codes."""
    x = tokens
    q_pos = tokens
    for p in blocks:
        x = decoder_block(x, memory, p, q_pos=q_pos, mem_pos=mem_pos)
    return x


def classify_pooled(token_features: Tensor, head: ClassHead) -> Tensor:
    """Mean over token rows, then the two-layer head; raw logits."""
    pooled = tt.mean_rows(token_features)
    hidden = tt.relu(tt.linear_apply(pooled, head.w1, head.b1))
    return tt.reshape(tt.linear_apply(hidden, head.w2, head.b2), (-1,))


def make_pseudo_labels(detections, n_classes: int, tau: float = 0.5) -> PseudoLabels:
    """Class j is present iff some detection of class j has confidence
    strictly above tau."""
    y = np.zeros(n_classes)
    for det in detections:
        cls, conf = det.cls, det.confidence
        if not 0 <= cls < n_classes:
            raise ValidationError(f"class {cls} outside [0, {n_classes})")
        if not 0.0 <= conf <= 1.0:
            raise ValidationError(f"confidence {conf} outside [0, 1]")
        if conf > tau:
            y[cls] = 1.0
    return PseudoLabels(y, tau)


def multilabel_bce(logits: Tensor, labels) -> Tensor:
    """Mean binary cross entropy of presence logits against {0,1} labels."""
    y = labels.y if isinstance(labels, PseudoLabels) else np.asarray(labels)
    return tt.bce_with_logits_mean(logits, y.reshape(logits.shape))


def enhance_object(q_o: Tensor, v_o: Tensor, tokens: Tensor,
                   lambda1: float, lambda2: float):
    """Residual enhancement of object queries and instance-decoder outputs;
    the human stream is never enhanced."""
    return (tt.residual_enhance(q_o, tokens, lambda1),
            tt.residual_enhance(v_o, tokens, lambda2))
