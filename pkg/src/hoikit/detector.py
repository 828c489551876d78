"""Host set-prediction pipeline: patch encoder, paired instance decoder,
interaction decoder, prediction heads, NMS, and end-to-end detection."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from . import action_queries as aq
from . import object_queries as oq
from . import tensor as tt
from .blocks import (AttnParams, DecoderBlockParams, EncoderBlockParams,
                     FfnParams, LayerNormParams, decoder_block, encoder_block)
from .config import ModelConfig
from .errors import ParseError, ShapeError, ValidationError
from .evaluation import iou
from .tensor import Parameter, Tensor
from .textbank import TextDictionary, embed_image_stub

_PARAM_SALT = 77003


@dataclass(frozen=True)
class HOIQuadruple:
    human_box: tuple
    object_box: tuple
    object_cls: int
    verb: int
    object_score: float
    action_score: float

    def __post_init__(self):
        for box in (self.human_box, self.object_box):
            if not (box[0] < box[2] and box[1] < box[3]):
                raise ValidationError(f"degenerate box {box}")
        for s in (self.object_score, self.action_score):
            if not 0.0 <= s <= 1.0:
                raise ValidationError(f"score {s} outside [0, 1]")


@dataclass(frozen=True)
class BoxHeadParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    w3: Tensor
    b3: Tensor
    anchor: Tensor | None = None   # per-slot (cx, cy, w, h) logit offsets


@dataclass
class ModelOutputs:
    memory: Tensor                 # encoded image, positions x channels
    image_embedding: Tensor | None
    action_trace: aq.ActionQueryTrace | None
    distill_logits: Tensor | None
    v_h: Tensor
    v_o: Tensor
    v_o_enh: Tensor
    v_a_enh: Tensor
    human_boxes: Tensor            # n_queries x 4 corner boxes
    object_boxes: Tensor
    class_logits: Tensor           # n_queries x (n_classes + 1), last = no-object
    action_logits: Tensor          # n_queries x n_verbs


def anchor_grid(n_queries: int, extent: float = 0.35) -> np.ndarray:
    """Per-slot (cx, cy, w, h) logits spreading the slots over a square grid."""
    side = int(np.ceil(np.sqrt(n_queries)))
    centers = [( (i % side + 0.5) / side, (i // side + 0.5) / side)
               for i in range(n_queries)]
    logit = lambda p: float(np.log(p / (1.0 - p)))
    return np.array([[logit(cx), logit(cy), logit(extent), logit(extent)]
                     for cx, cy in centers])


def focus_bias(n_slots: int, n_tokens: int, strength: float) -> np.ndarray:
    """Initial cross-attention logit bias binding slot k to memory position
    k mod n_tokens. Slots start reading their own grid cell (content and
    position code together), which sidesteps the uniform-attention plateau
    where additive position codes cancel out of the value mix."""
    b = np.zeros((n_slots, n_tokens))
    for k in range(n_slots):
        b[k, k % n_tokens] = strength
    return b


def sinusoidal_positions(n: int, dim: int) -> np.ndarray:
    """Fixed 1-D sin/cos position codes over token index."""
    pos = np.arange(n)[:, None]
    i = np.arange(dim // 2)[None, :]
    angles = pos / (10000.0 ** (2.0 * i / dim))
    out = np.zeros((n, dim))
    out[:, 0::2] = np.sin(angles)
    out[:, 1::2] = np.cos(angles[:, : dim - dim // 2])
    return out


def patchify(image: np.ndarray, patch_size: int) -> np.ndarray:
    """Non-overlapping patches flattened to rows: (H/p * W/p) x (3 p^2)."""
    c, h, w = image.shape
    p = patch_size
    if h % p != 0 or w % p != 0:
        raise ValidationError(f"image {h}x{w} not divisible by patch size {p}")
    return (image.reshape(c, h // p, p, w // p, p)
            .transpose(1, 3, 0, 2, 4)
            .reshape((h // p) * (w // p), c * p * p))


def encode_image(patches: Tensor, patch_w: Tensor, patch_b: Tensor,
                 positions: np.ndarray, blocks) -> Tensor:
    """Project patch rows, add position codes, run the encoder stack; the
    codes also feed every block's attention so location survives depth."""
    x = tt.linear_apply(patches, patch_w, patch_b) + Tensor(positions)
    for p in blocks:
        x = encoder_block(x, p, pos=positions)
    return x


def instance_decode(q_h: Tensor, q_o: Tensor, memory: Tensor, blocks,
                    mem_pos: np.ndarray | None = None):
    """Joint decoding of the paired human/object streams: the two query sets
    concatenate for self-attention (slot i of each stream stays paired) and
    split back afterwards. The initial query values double as the slots'
    attention position codes. Zero blocks fall back to identity."""
    if q_h.shape != q_o.shape:
        raise ShapeError(f"paired query sets differ: {q_h.shape} vs {q_o.shape}")
    if not blocks:
        return q_h, q_o
    n = q_h.shape[0]
    x = tt.concat([q_h, q_o], axis=0)
    q_pos = x
    for p in blocks:
        x = decoder_block(x, memory, p, q_pos=q_pos, mem_pos=mem_pos)
    return x[:n, :], x[n:, :]


def interaction_decode(q_a: Tensor, memory: Tensor, blocks,
                       mem_pos: np.ndarray | None = None) -> Tensor:
    if not blocks:
        return q_a
    x = q_a
    q_pos = q_a
    for p in blocks:
        x = decoder_block(x, memory, p, q_pos=q_pos, mem_pos=mem_pos)
    return x


def form_action_queries(v_h: Tensor, v_o: Tensor, fusion: str = "sum",
                        fuse_w: Tensor | None = None,
                        fuse_b: Tensor | None = None) -> Tensor:
    """Combine the instance streams into interaction queries."""
    if v_h.shape != v_o.shape:
        raise ShapeError(f"stream shapes differ: {v_h.shape} vs {v_o.shape}")
    if fusion == "sum":
        return v_h + v_o
    if fusion == "concat":
        return tt.linear_apply(tt.concat([v_h, v_o], axis=1), fuse_w, fuse_b)
    raise ValidationError(f"unknown fusion {fusion!r}")


def boxes_from_features(features: Tensor, head: BoxHeadParams,
                        min_extent: float) -> Tensor:
    """Three-layer MLP to (cx, cy, w, h) in (0,1) via sigmoid, converted to
    corner boxes clipped into [0,1]^2 with a minimum extent. Per-slot anchor
    logits, when present, spread the slots over the image at initialization."""
    h = tt.mlp_relu(features, head.w1, head.b1, head.w2, head.b2)
    raw = tt.linear_apply(tt.relu(h), head.w3, head.b3)
    if head.anchor is not None:
        raw = raw + head.anchor
    s = tt.sigmoid(raw)
    return tt.corner_boxes(s, min_extent)


def predict_instances(v_h: Tensor, v_o_enh: Tensor, human_head: BoxHeadParams,
                      object_head: BoxHeadParams, cls_w: Tensor, cls_b: Tensor,
                      min_extent: float):
    """Per-slot human box, object box and object-class distribution logits
    (the extra last class means no-object)."""
    hboxes = boxes_from_features(v_h, human_head, min_extent)
    oboxes = boxes_from_features(v_o_enh, object_head, min_extent)
    return hboxes, oboxes, tt.linear_apply(v_o_enh, cls_w, cls_b)


def predict_actions(v_a_enh: Tensor, act_w: Tensor, act_b: Tensor) -> Tensor:
    """Per-slot verb logits with multi-label sigmoid semantics."""
    return tt.linear_apply(v_a_enh, act_w, act_b)


def nms_filter(quads, iou_thresh: float = 0.7):
    """Greedy suppression by descending combined score: a candidate is dropped
    when a kept quadruple of the same (object class, verb) overlaps it on BOTH
    boxes above the threshold. Kept order is the (stable) score order."""
    order = sorted(quads, key=lambda q: -(q.object_score * q.action_score))
    kept = []
    for q in order:
        dominated = any(
            k.object_cls == q.object_cls and k.verb == q.verb
            and iou(k.human_box, q.human_box) > iou_thresh
            and iou(k.object_box, q.object_box) > iou_thresh
            for k in kept)
        if not dominated:
            kept.append(q)
    return kept


def _name_seed(name: str) -> int:
    return int.from_bytes(hashlib.sha256(name.encode()).digest()[:8], "little")


class HOIModel:
    """Parameter container and forward pass. Every parameter is initialized
    from its own (seed, name)-derived stream, so builds with different module
    subsets share the weights of the parts they have in common."""

    def __init__(self, config: ModelConfig):
        self.config = config
        self.params: dict[str, Parameter] = {}
        c = config.channels
        d = config.text_dim
        patch_dim = 3 * config.patch_size ** 2
        n_cls = config.n_object_classes

        self.patch_w = self._weight("enc.patch.w", patch_dim, c)
        self.patch_b = self._zeros("enc.patch.b", c)
        n_tokens = (config.image_size // config.patch_size) ** 2
        self.positions = sinusoidal_positions(n_tokens, c)
        self.encoder_blocks = tuple(
            self._encoder_block(f"enc{i}", c, config.ffn_ratio)
            for i in range(config.encoder_depth))

        self.q_h = self._embedding("queries.human", config.n_queries, c)
        self.q_o = self._embedding("queries.object", config.n_queries, c)
        self.instance_blocks = tuple(
            self._decoder_block(f"inst{i}", c, config.ffn_ratio,
                                n_slots=2 * config.n_queries)
            for i in range(config.decoder_depth))
        self.interaction_blocks = tuple(
            self._decoder_block(f"inter{i}", c, config.ffn_ratio,
                                n_slots=config.n_queries)
            for i in range(config.decoder_depth))

        self.human_head = self._box_head("head.human", c)
        self.object_head = self._box_head("head.object", c)
        self.cls_w = self._weight("head.cls.w", c, n_cls + 1)
        self.cls_b = self._zeros("head.cls.b", n_cls + 1)
        self.act_w = self._weight("head.act.w", c, config.n_verbs)
        self.act_b = self._zeros("head.act.b", config.n_verbs)

        if config.action_fusion == "concat":
            self.fuse_w = self._weight("fuse.w", 2 * c, c)
            self.fuse_b = self._zeros("fuse.b", c)
        else:
            self.fuse_w = self.fuse_b = None

        if config.use_object_tokens:
            self.tokens = self._embedding("tok.P", config.n_queries, c)
            self.token_blocks = tuple(
                self._decoder_block(f"tok{i}", c, config.ffn_ratio,
                                    n_slots=config.n_queries)
                for i in range(config.token_decoder_depth))
            self.token_head = oq.ClassHead(
                self._weight("tok.head.w1", c, oq.HEAD_HIDDEN),
                self._zeros("tok.head.b1", oq.HEAD_HIDDEN),
                self._weight("tok.head.w2", oq.HEAD_HIDDEN, n_cls),
                self._zeros("tok.head.b2", n_cls))

        if config.use_action_queries:
            self.img_w = self._weight("img.proj.w", c, d)
            self.img_b = self._zeros("img.proj.b", d)
            layers = []
            for i in range(config.text_layers):
                base = f"act{i}"
                layers.append(aq.TextLayerParams(
                    wq=self._weight(f"{base}.wq", d, d),
                    wk=self._weight(f"{base}.wk", d, d),
                    wv=self._weight(f"{base}.wv", d, d),
                    ln=self._ln(f"{base}.ln", d),
                    ffn=self._ffn(f"{base}.ffn", d, config.ffn_ratio)))
            self.action_params = aq.ActionQueryParams(
                tuple(layers),
                self._weight("act.out.w", d, c),
                self._zeros("act.out.b", c))

    # -- parameter construction -------------------------------------------

    def _rng(self, name: str) -> np.random.Generator:
        return np.random.default_rng([_PARAM_SALT, self.config.seed,
                                      _name_seed(name)])

    def _register(self, name: str, data: np.ndarray) -> Parameter:
        p = Parameter(data, name)
        self.params[name] = p
        return p

    def _weight(self, name: str, fan_in: int, fan_out: int) -> Parameter:
        data = self._rng(name).normal(0.0, fan_in ** -0.5, (fan_in, fan_out))
        return self._register(name, data)

    def _embedding(self, name: str, n: int, dim: int) -> Parameter:
        return self._register(name, self._rng(name).normal(0.0, 0.5, (n, dim)))

    def _zeros(self, name: str, *shape) -> Parameter:
        return self._register(name, np.zeros(shape))

    def _ones(self, name: str, *shape) -> Parameter:
        return self._register(name, np.ones(shape))

    def _ln(self, name: str, dim: int) -> LayerNormParams:
        return LayerNormParams(self._ones(f"{name}.g", dim),
                               self._zeros(f"{name}.b", dim))

    def _ffn(self, name: str, dim: int, ratio: int) -> FfnParams:
        return FfnParams(self._weight(f"{name}.w1", dim, ratio * dim),
                         self._zeros(f"{name}.b1", ratio * dim),
                         self._weight(f"{name}.w2", ratio * dim, dim),
                         self._zeros(f"{name}.b2", dim))

    def _attn(self, name: str, dim: int) -> AttnParams:
        return AttnParams(self._weight(f"{name}.wq", dim, dim),
                          self._zeros(f"{name}.bq", dim),
                          self._weight(f"{name}.wk", dim, dim),
                          self._zeros(f"{name}.bk", dim),
                          self._weight(f"{name}.wv", dim, dim),
                          self._zeros(f"{name}.bv", dim),
                          self._weight(f"{name}.wo", dim, dim),
                          self._zeros(f"{name}.bo", dim))

    def _encoder_block(self, name: str, dim: int, ratio: int) -> EncoderBlockParams:
        return EncoderBlockParams(self._attn(f"{name}.attn", dim),
                                  self._ln(f"{name}.ln1", dim),
                                  self._ffn(f"{name}.ffn", dim, ratio),
                                  self._ln(f"{name}.ln2", dim))

    def _decoder_block(self, name: str, dim: int, ratio: int,
                       n_slots: int = 0) -> DecoderBlockParams:
        n_tokens = (self.config.image_size // self.config.patch_size) ** 2
        bias = None
        if n_slots:
            bias = self._register(f"{name}.bias",
                                  focus_bias(n_slots, n_tokens,
                                             self.config.attn_focus))
        return DecoderBlockParams(self._attn(f"{name}.self", dim),
                                  self._ln(f"{name}.ln1", dim),
                                  self._attn(f"{name}.cross", dim),
                                  self._ln(f"{name}.ln2", dim),
                                  self._ffn(f"{name}.ffn", dim, ratio),
                                  self._ln(f"{name}.ln3", dim),
                                  bias)

    def _box_head(self, name: str, dim: int) -> BoxHeadParams:
        return BoxHeadParams(self._weight(f"{name}.w1", dim, dim),
                             self._zeros(f"{name}.b1", dim),
                             self._weight(f"{name}.w2", dim, dim),
                             self._zeros(f"{name}.b2", dim),
                             self._weight(f"{name}.w3", dim, 4),
                             self._zeros(f"{name}.b3", 4),
                             self._register(f"{name}.anchor",
                                            anchor_grid(self.config.n_queries)))

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    # -- forward ------------------------------------------------------------

    def forward(self, image: np.ndarray | None, tdict: TextDictionary | None,
                patches: np.ndarray | None = None) -> ModelOutputs:
        cfg = self.config
        if patches is None:
            patches = patchify(np.asarray(image), cfg.patch_size)
        memory = encode_image(Tensor(patches), self.patch_w, self.patch_b,
                              self.positions, self.encoder_blocks)

        image_embedding = action_trace = None
        distill_logits = None

        q_o = self.q_o
        if cfg.use_object_tokens:
            token_features = oq.decode_object_tokens(self.tokens, memory,
                                                     self.token_blocks,
                                                     mem_pos=self.positions)
            distill_logits = oq.classify_pooled(token_features, self.token_head)

        if cfg.use_action_queries:
            if tdict is None:
                raise ValidationError("text dictionary required for the "
                                      "action-query branch")
            image_embedding = embed_image_stub(memory, self.img_w, self.img_b)
            action_trace = aq.build_action_queries(
                image_embedding, Tensor(tdict.embeddings),
                self.action_params, cfg.n_queries)

        if cfg.use_object_tokens:
            q_o = tt.residual_enhance(self.q_o, self.tokens, cfg.lambda1)

        v_h, v_o = instance_decode(self.q_h, q_o, memory, self.instance_blocks,
                                   mem_pos=self.positions)
        v_o_enh = v_o
        if cfg.use_object_tokens:
            v_o_enh = tt.residual_enhance(v_o, self.tokens, cfg.lambda2)
        hboxes, oboxes, class_logits = predict_instances(
            v_h, v_o_enh, self.human_head, self.object_head,
            self.cls_w, self.cls_b, cfg.min_box_extent)

        q_a = form_action_queries(v_h, v_o, cfg.action_fusion,
                                  self.fuse_w, self.fuse_b)
        if cfg.use_action_queries:
            q_a = tt.residual_enhance(q_a, action_trace.queries, cfg.gamma1)
        v_a = interaction_decode(q_a, memory, self.interaction_blocks,
                                 mem_pos=self.positions)
        v_a_enh = v_a
        if cfg.use_action_queries:
            v_a_enh = tt.residual_enhance(v_a, action_trace.queries, cfg.gamma2)
        action_logits = predict_actions(v_a_enh, self.act_w, self.act_b)

        return ModelOutputs(memory, image_embedding, action_trace,
                            distill_logits, v_h, v_o, v_o_enh, v_a_enh,
                            hboxes, oboxes, class_logits, action_logits)


def quads_from_outputs(out: ModelOutputs, n_object_classes: int):
    """One quadruple per slot: best real object class with its softmax
    probability (no-object mass included in the normalization), best verb
    with its sigmoid score."""
    probs = tt.softmax_rows(out.class_logits).data
    verb_scores = 1.0 / (1.0 + np.exp(-out.action_logits.data))
    quads = []
    for i in range(probs.shape[0]):
        cls = int(np.argmax(probs[i, :n_object_classes]))
        verb = int(np.argmax(verb_scores[i]))
        quads.append(HOIQuadruple(tuple(float(v) for v in out.human_boxes.data[i]),
                                  tuple(float(v) for v in out.object_boxes.data[i]),
                                  cls, verb,
                                  float(probs[i, cls]),
                                  float(verb_scores[i, verb])))
    return quads


def detect(image: np.ndarray, model: HOIModel, tdict: TextDictionary | None,
           patches: np.ndarray | None = None):
    """Full pipeline for one image: encode, decode, head out, suppress."""
    out = model.forward(image, tdict, patches=patches)
    quads = quads_from_outputs(out, model.config.n_object_classes)
    return nms_filter(quads, model.config.nms_iou)


# ---------------------------------------------------------------------------
# prediction files
# ---------------------------------------------------------------------------

_PRED_HEADER = "# hoikit-preds v1"


def write_predictions(path, preds_by_image: dict) -> None:
    """One record per image: image_id, then ';'-joined quads, each quad being
    'hx1,hy1,hx2,hy2,ox1,oy1,ox2,oy2,object_cls,verb,object_score,action_score'."""
    with open(path, "w") as f:
        f.write(_PRED_HEADER + "\n")
        for image_id in sorted(preds_by_image):
            quads = preds_by_image[image_id]
            enc = ";".join(
                ",".join(repr(v) for v in (*q.human_box, *q.object_box))
                + f",{q.object_cls},{q.verb},{q.object_score!r},{q.action_score!r}"
                for q in quads)
            f.write(f"{image_id}\t{enc}\n")


def read_predictions(path) -> dict:
    preds = {}
    with open(path) as f:
        first = f.readline().rstrip("\n")
        if first != _PRED_HEADER:
            raise ParseError(f"bad predictions header {first!r}", 1)
        for ln, line in enumerate(f, start=2):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) > 2:
                raise ParseError("expected 'image_id<TAB>quads'", ln)
            image_id = parts[0]
            quads = []
            body = parts[1] if len(parts) == 2 else ""
            for item in body.split(";"):
                if not item:
                    continue
                fields = item.split(",")
                if len(fields) != 12:
                    raise ParseError(f"quad needs 12 fields, got {len(fields)}", ln)
                try:
                    nums = [float(v) for v in fields]
                except ValueError as exc:
                    raise ParseError(f"bad quad numbers {item!r}", ln) from exc
                quads.append(HOIQuadruple(tuple(nums[0:4]), tuple(nums[4:8]),
                                          int(nums[8]), int(nums[9]),
                                          nums[10], nums[11]))
            preds[image_id] = quads
    return preds
