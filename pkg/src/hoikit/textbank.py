"""Interaction prompt dictionary and the deterministic stub extractors that
stand in for pre-trained vision-language encoders.

The text stub keeps the one property the cross-modal branch relies on:
prompts sharing tokens land closer in embedding space than unrelated ones.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .errors import ParseError, ValidationError
from .tensor import Tensor, l2_normalize_rows, linear_apply, mean_rows, reshape, transpose


@dataclass(frozen=True)
class PromptTemplate:
    """Pattern with {1} = action verb and {2} = object noun, each used once."""

    pattern: str
    name: str

    def __post_init__(self):
        for ph in ("{1}", "{2}"):
            if self.pattern.count(ph) != 1:
                raise ValidationError(
                    f"template {self.name!r} must contain {ph} exactly once")


TEMPLATES = {
    t.name: t
    for t in (
        PromptTemplate("person {1} {2}", "plain"),
        PromptTemplate("someone {1} a/an {2} outdoors or indoors", "someone"),
        PromptTemplate("a person is {1}ing a/an {2}", "progressive"),
        PromptTemplate("person interacting with a/an {2} by {1}ing", "interact"),
    )
}


def gerund(verb: str) -> str:
    """Naive -ing form: drop a trailing 'e', then append 'ing'."""
    stem = verb[:-1] if verb.endswith("e") else verb
    return stem + "ing"


def render_prompt(template: PromptTemplate, verb: str, obj: str) -> str:
    for name, tok in (("verb", verb), ("object", obj)):
        if not tok or tok != tok.lower() or tok.strip() != tok:
            raise ValidationError(f"{name} must be a non-empty lowercase token, got {tok!r}")
    out = template.pattern
    if "{1}ing" in out:
        out = out.replace("{1}ing", gerund(verb))
    else:
        out = out.replace("{1}", verb)
    return out.replace("{2}", obj)


def _token_vector(token: str, d_t: int, seed: int) -> np.ndarray:
    digest = hashlib.sha256(f"{seed}|{token}".encode()).digest()
    rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
    v = rng.standard_normal(d_t)
    return v / np.linalg.norm(v)


def embed_text_stub(prompt: str, d_t: int, seed: int) -> np.ndarray:
    """Deterministic prompt embedding: per-token seeded unit vectors averaged
    over whitespace tokens, then L2-normalized. Returns a 1 x d_t array."""
    if d_t < 8:
        raise ValidationError(f"d_t must be at least 8, got {d_t}")
    tokens = prompt.split()
    if not tokens:
        raise ValidationError("prompt has no tokens")
    avg = np.mean([_token_vector(t, d_t, seed) for t in tokens], axis=0)
    norm = np.linalg.norm(avg)
    if norm < 1e-12:
        return np.full((1, d_t), 1.0 / np.sqrt(d_t))
    return (avg / norm)[None, :]


def embed_image_stub(features: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Global image embedding: average-pool feature positions, project through
    the learnable channels -> d_t map, L2-normalize. Accepts either a
    channels x H x W map or an already-flattened positions x channels matrix;
    an all-zero pooled vector maps to the uniform unit vector by convention."""
    if features.ndim == 3:
        c = features.shape[0]
        features = transpose(reshape(features, (c, -1)))
    pooled = mean_rows(features)
    return l2_normalize_rows(linear_apply(pooled, weight, bias))


@dataclass(frozen=True)
class TextDictionary:
    """Embedded interaction prompts, one row per (verb, object) category."""

    embeddings: np.ndarray            # N_T x d_t, unit rows
    prompts: tuple[str, ...]
    category_index: dict              # (verb, object) -> row

    @property
    def size(self) -> int:
        return self.embeddings.shape[0]


def build_dictionary(vocab, template: PromptTemplate, d_t: int, seed: int) -> TextDictionary:
    """Embed one prompt per interaction category; row order follows vocab order."""
    if not vocab:
        raise ValidationError("vocabulary is empty")
    if len(set(vocab)) != len(vocab):
        raise ValidationError("vocabulary contains duplicate (verb, object) pairs")
    prompts = [render_prompt(template, v, o) for v, o in vocab]
    emb = np.vstack([embed_text_stub(p, d_t, seed) for p in prompts])
    index = {pair: i for i, pair in enumerate(vocab)}
    return TextDictionary(emb, tuple(prompts), index)


def write_vocab(path, vocab) -> None:
    with open(path, "w") as f:
        for verb, obj in vocab:
            f.write(f"{verb}\t{obj}\n")


def read_vocab(path):
    vocab = []
    with open(path) as f:
        for ln, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ParseError(f"expected 'verb<TAB>object', got {line!r}", ln)
            vocab.append((parts[0], parts[1]))
    return vocab
