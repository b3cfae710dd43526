"""Decoder-only transformer with a dense path and a token-gated sparse path.

The sparse layer follows the usual pre-norm block but only computes the
positions whose mask entry is 1:

* masked positions are removed from attention as both queries and keys,
  and their attention output is zero, so the residual leaves them intact;
* the MLP runs on the gathered active rows only and is scattered back.

Skipped positions therefore leave every layer bit-identical to how they
entered it.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import __version__
from . import autodiff as ad
from .autodiff import Tensor
from .data import IGNORE, Batch, Role, TokenSequence, collate

CHECKPOINT_FORMAT = "regate-checkpoint/1"


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 2
    n_heads: int = 2
    d_model: int = 32
    d_ff: int = 64
    vocab_size: int = 42
    max_seq_len: int = 16
    visual_id_range: tuple[int, int] = (26, 42)
    pad_id: int = 0
    bos_id: int = 1
    tie_embeddings: bool = False

    def __post_init__(self):
        object.__setattr__(self, "visual_id_range", tuple(int(v) for v in self.visual_id_range))
        if min(self.n_layers, self.n_heads, self.d_model, self.d_ff, self.vocab_size, self.max_seq_len) < 1:
            raise ValueError("model dimensions must be positive")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        lo, hi = self.visual_id_range
        if not 0 <= lo <= hi <= self.vocab_size:
            raise ValueError("visual_id_range must lie inside the vocabulary")
        if self.pad_id == self.bos_id:
            raise ValueError("pad_id and bos_id must differ")
        for special in (self.pad_id, self.bos_id):
            if not 0 <= special < self.vocab_size:
                raise ValueError("special token id outside vocabulary")
            if lo <= special < hi:
                raise ValueError("special token ids must not fall in visual_id_range")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    def is_visual(self, ids) -> np.ndarray:
        lo, hi = self.visual_id_range
        ids = np.asarray(ids)
        return (ids >= lo) & (ids < hi)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["visual_id_range"] = list(self.visual_id_range)
        return d


class ModelParams:
    """Named parameter tensors plus the config they were built for."""

    def __init__(self, config: ModelConfig, tensors: dict[str, Tensor]):
        self.config = config
        self.tensors = tensors

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors.values())

    @property
    def dtype(self):
        return next(iter(self.tensors.values())).dtype

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def copy(self, requires_grad: bool | None = None) -> "ModelParams":
        new = {}
        for k, t in self.tensors.items():
            rg = t.requires_grad if requires_grad is None else requires_grad
            new[k] = Tensor(t.data.copy(), requires_grad=rg)
        return ModelParams(self.config, new)

    def frozen(self) -> "ModelParams":
        """Independent copy that records no graph and never receives updates."""
        p = self.copy(requires_grad=False)
        for t in p.tensors.values():
            t.data.setflags(write=False)
        return p

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(self.config, {k: Tensor(t.data.astype(dtype), requires_grad=t.requires_grad)
                                         for k, t in self.tensors.items()})

    def sha256(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.tensors):
            arr = np.ascontiguousarray(self.tensors[name].data)
            h.update(name.encode())
            h.update(str(arr.dtype).encode())
            h.update(str(arr.shape).encode())
            h.update(arr.tobytes())
        return h.hexdigest()


def init_params(config: ModelConfig, seed: int = 0, dtype=np.float32, init_std: float = 0.02) -> ModelParams:
    rng = np.random.default_rng(seed)
    d, f, v = config.d_model, config.d_ff, config.vocab_size

    def normal(*shape, std=init_std):
        return rng.normal(0.0, std, size=shape)

    raw: dict[str, np.ndarray] = {
        "tok_emb": normal(v, d),
        "pos_emb": normal(config.max_seq_len, d),
    }
    proj_std = init_std / math.sqrt(2 * config.n_layers)
    for l in range(config.n_layers):
        p = f"layers.{l}."
        raw[p + "ln_in.gain"] = np.ones(d)
        raw[p + "ln_in.bias"] = np.zeros(d)
        raw[p + "attn.wq"] = normal(d, d)
        raw[p + "attn.wk"] = normal(d, d)
        raw[p + "attn.wv"] = normal(d, d)
        raw[p + "attn.wo"] = normal(d, d, std=proj_std)
        raw[p + "ln_post.gain"] = np.ones(d)
        raw[p + "ln_post.bias"] = np.zeros(d)
        raw[p + "mlp.w1"] = normal(d, f)
        raw[p + "mlp.b1"] = np.zeros(f)
        raw[p + "mlp.w2"] = normal(f, d, std=proj_std)
        raw[p + "mlp.b2"] = np.zeros(d)
    raw["ln_f.gain"] = np.ones(d)
    raw["ln_f.bias"] = np.zeros(d)
    if not config.tie_embeddings:
        raw["head"] = normal(d, v)
    tensors = {k: Tensor(a.astype(dtype), requires_grad=True) for k, a in raw.items()}
    return ModelParams(config, tensors)


# -- building blocks ------------------------------------------------------------


def _as_batch(params: ModelParams, batch) -> Batch:
    if isinstance(batch, Batch):
        return batch
    if isinstance(batch, TokenSequence):
        batch = [batch]
    return collate(list(batch), params.config.pad_id)


def embed(params: ModelParams, tokens: np.ndarray) -> Tensor:
    """Token plus learned absolute position embeddings, ``[B, T, D]``."""
    tokens = np.asarray(tokens, dtype=np.int64)
    b, t = tokens.shape
    if t > params.config.max_seq_len:
        raise ValueError(f"sequence length {t} exceeds max_seq_len {params.config.max_seq_len}")
    tok = ad.embedding(params["tok_emb"], tokens)
    pos = ad.embedding(params["pos_emb"], np.arange(t))
    return ad.add(tok, pos)


def _attention(params: ModelParams, layer: int, x: Tensor, additive_mask: np.ndarray) -> Tensor:
    cfg = params.config
    p = f"layers.{layer}.attn."
    b, t, d = x.shape
    h, dh = cfg.n_heads, cfg.d_head

    def heads(w):
        return ad.transpose(ad.reshape(ad.matmul(x, params[p + w]), (b, t, h, dh)), (0, 2, 1, 3))

    q, k, v = heads("wq"), heads("wk"), heads("wv")
    scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    probs = ad.softmax_rows(scores, additive_mask)
    ctx = ad.reshape(ad.transpose(ad.matmul(probs, v), (0, 2, 1, 3)), (b, t, d))
    return ad.matmul(ctx, params[p + "wo"])


def _mlp(params: ModelParams, layer: int, x: Tensor) -> Tensor:
    p = f"layers.{layer}."
    y = ad.layer_norm(x, params[p + "ln_post.gain"], params[p + "ln_post.bias"])
    hid = ad.gelu(ad.add(ad.matmul(y, params[p + "mlp.w1"]), params[p + "mlp.b1"]))
    return ad.add(ad.matmul(hid, params[p + "mlp.w2"]), params[p + "mlp.b2"])


def _causal_additive(t: int, dtype) -> np.ndarray:
    allowed = np.tril(np.ones((t, t), dtype=bool))
    return np.where(allowed, 0.0, ad.MASK_VALUE).astype(dtype)[None, None]


def dense_decoder_layer(params: ModelParams, layer: int, H: Tensor) -> Tensor:
    """Reference pre-norm block over every position (causal mask only)."""
    p = f"layers.{layer}."
    t = H.shape[1]
    x = ad.layer_norm(H, params[p + "ln_in.gain"], params[p + "ln_in.bias"])
    H = ad.add(H, _attention(params, layer, x, _causal_additive(t, H.dtype)))
    return ad.add(H, _mlp(params, layer, H))


def gated_attention_mask(mask: np.ndarray, dtype) -> np.ndarray:
    """Additive ``[B, 1, T, T]`` mask: causal and both endpoints kept."""
    mask = np.asarray(mask, dtype=bool)
    t = mask.shape[1]
    allowed = np.tril(np.ones((t, t), dtype=bool))[None] & mask[:, :, None] & mask[:, None, :]
    return np.where(allowed, 0.0, ad.MASK_VALUE).astype(dtype)[:, None]


def sparse_decoder_layer(params: ModelParams, layer: int, H: Tensor, mask: np.ndarray) -> Tensor:
    """One gated decoder layer over ``H`` of shape ``[B, T, D]`` (or ``[T, D]``).

    ``mask`` is ``[B, T]`` (or ``[T]``) with 1 = compute, 0 = skip.
    """
    squeeze = False
    mask = np.asarray(mask)
    if H.data.ndim == 2:
        H = ad.reshape(H, (1,) + H.shape)
        mask = mask[None]
        squeeze = True
    b, t, d = H.shape
    if mask.shape != (b, t):
        raise ValueError(f"mask shape {mask.shape} does not match hidden states {(b, t)}")
    mask = mask.astype(bool)
    p = f"layers.{layer}."
    x = ad.layer_norm(H, params[p + "ln_in.gain"], params[p + "ln_in.bias"])
    a = _attention(params, layer, x, gated_attention_mask(mask, H.dtype))
    # zero the pruned rows explicitly; the all-masked softmax rows are already 0
    a = ad.mul(a, mask[:, :, None].astype(H.dtype))
    H = ad.add(H, a)
    active = np.flatnonzero(mask.reshape(-1))
    flat = ad.reshape(H, (b * t, d))
    if active.size:
        h = _mlp(params, layer, ad.take_rows(flat, active))
        flat = ad.scatter_add_rows(flat, active, h)
    out = ad.reshape(flat, (b, t, d))
    if squeeze:
        out = ad.reshape(out, (t, d))
    return out


def _head(params: ModelParams, H: Tensor) -> Tensor:
    x = ad.layer_norm(H, params["ln_f.gain"], params["ln_f.bias"])
    if params.config.tie_embeddings:
        w = ad.transpose(params["tok_emb"], (1, 0))
    else:
        w = params["head"]
    return ad.matmul(x, w)


def forward_dense(params: ModelParams, batch) -> Tensor:
    """Logits ``[B, T, V]`` with a plain causal mask."""
    batch = _as_batch(params, batch)
    H = embed(params, batch.tokens)
    for l in range(params.config.n_layers):
        H = dense_decoder_layer(params, l, H)
    return _head(params, H)


def forward_sparse(params: ModelParams, batch, mask: np.ndarray, return_stats: bool = False):
    """Logits ``[B, T, V]`` with every layer gated by ``mask``.

    Logits at skipped positions are computed by the head but carry no
    meaning. With ``return_stats`` a dict of dispatch counts is returned too.
    """
    batch = _as_batch(params, batch)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != batch.tokens.shape:
        raise ValueError(f"mask shape {mask.shape} does not match batch {batch.tokens.shape}")
    H = embed(params, batch.tokens)
    for l in range(params.config.n_layers):
        H = sparse_decoder_layer(params, l, H, mask)
    logits = _head(params, H)
    if return_stats:
        n = int(mask.sum())
        return logits, {"mlp_rows_per_layer": [n] * params.config.n_layers, "tokens_forwarded": n}
    return logits


def full_mask(batch: Batch) -> np.ndarray:
    """Every non-pad position kept."""
    return batch.roles != Role.PAD


# -- losses ----------------------------------------------------------------------


def per_token_losses(logits: Tensor, batch: Batch, positions: np.ndarray) -> Tensor:
    """Cross entropy ``[B*T]`` evaluated where ``positions`` is true."""
    b, t, v = logits.shape
    flat = ad.reshape(logits, (b * t, v))
    return ad.cross_entropy_per_token(flat, batch.labels.reshape(-1), positions.reshape(-1))


def student_label_loss(logits: Tensor, batch: Batch, mask: np.ndarray, normalize: str = "kept"):
    """Scalar training loss plus per-position losses (NaN where not evaluated).

    The scalar averages over label positions kept by ``mask``
    (``normalize="kept"``) or divides the same sum by the count of all label
    positions in the batch (``normalize="all"``).
    """
    mask = np.asarray(mask, dtype=bool)
    label = batch.label_mask
    evaluated = label & mask
    n_kept = int(evaluated.sum())
    if n_kept == 0:
        raise RuntimeError("no kept label position in the batch; gating produced an empty loss")
    losses = per_token_losses(logits, batch, evaluated)
    if normalize == "kept":
        denom = n_kept
    elif normalize == "all":
        denom = int(label.sum())
    else:
        raise ValueError(f"unknown normalization {normalize!r}")
    scalar = ad.mean_over(losses, denom)
    per_pos = np.where(evaluated, losses.data.reshape(batch.tokens.shape), np.nan)
    return scalar, per_pos


def dense_label_loss(params: ModelParams, seqs: Sequence[TokenSequence], chunk: int = 256) -> float:
    """Mean label cross entropy under the dense forward, no graph recorded."""
    total, count = 0.0, 0
    with ad.no_grad():
        for i in range(0, len(seqs), chunk):
            batch = collate(seqs[i:i + chunk], params.config.pad_id)
            logits = forward_dense(params, batch)
            pos = batch.label_mask
            losses = per_token_losses(logits, batch, pos)
            total += float(losses.data.astype(np.float64).sum())
            count += int(pos.sum())
    return total / count


def teacher_ref_loss(teacher: ModelParams, seq: TokenSequence) -> np.ndarray:
    """Per-position reference loss of a frozen text-only model.

    Visual tokens are replaced by the pad id before the forward pass, so the
    teacher can only use text. Returns a float64 array of length ``len(seq)``
    holding the loss at label positions and NaN elsewhere.
    """
    cfg = teacher.config
    hat = seq.text_only(cfg.pad_id)
    with ad.no_grad():
        batch = collate([hat], cfg.pad_id)
        logits = forward_dense(teacher, batch)
        pos = batch.label_mask
        losses = per_token_losses(logits, batch, pos).data.astype(np.float64)
    return np.where(pos[0], losses, np.nan)


def next_token_ref_loss(teacher: ModelParams, seq: TokenSequence, positions: np.ndarray) -> np.ndarray:
    """Teacher loss of the actual next token at arbitrary ``positions`` (NaN elsewhere)."""
    cfg = teacher.config
    hat = seq.text_only(cfg.pad_id)
    positions = np.asarray(positions, dtype=np.int64)
    targets = np.full(len(seq), IGNORE, dtype=np.int64)
    valid = positions[positions + 1 < len(seq)]
    targets[valid] = seq.tokens[valid + 1]
    evaluated = targets != IGNORE
    with ad.no_grad():
        batch = collate([hat], cfg.pad_id)
        logits = forward_dense(teacher, batch)
        flat = ad.reshape(logits, (len(seq), cfg.vocab_size))
        losses = ad.cross_entropy_per_token(flat, targets, evaluated).data.astype(np.float64)
    return np.where(evaluated, losses, np.nan)


# -- checkpoints --------------------------------------------------------------------


def save_checkpoint(path, params: ModelParams, extra: dict | None = None) -> None:
    meta = {
        "format": CHECKPOINT_FORMAT,
        "version": __version__,
        "config": params.config.to_dict(),
        "extra": extra or {},
    }
    arrays = {f"param:{k}": t.data for k, t in params.tensors.items()}
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.array(json.dumps(meta, sort_keys=True)), **arrays)


def load_checkpoint(path, requires_grad: bool = True) -> tuple[ModelParams, dict]:
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["__meta__"]))
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"unsupported checkpoint format {meta.get('format')!r}")
        cfg = ModelConfig(**meta["config"])
        tensors = {k[len("param:"):]: Tensor(z[k].copy(), requires_grad=requires_grad)
                   for k in z.files if k.startswith("param:")}
    return ModelParams(cfg, tensors), meta.get("extra", {})
