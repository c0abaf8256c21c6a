"""A small causal pre-norm transformer language model.

Parameters live in a flat ParamTree with a fixed canonical name order; the
forward pass builds an autodiff graph over them. Token rows of the output
depend only on earlier tokens (dense causal attention, no KV cache), and all
math is float64.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .tree import ParamTree

MASK_NEG = -1e30  # additive attention mask; finite so no inf/nan arithmetic


@dataclass(frozen=True)
class LmConfig:
    vocab_size: int
    seq_len: int
    n_blocks: int
    hidden_dim: int
    n_heads: int
    seed: int = 0

    def __post_init__(self):
        if self.hidden_dim % self.n_heads != 0:
            raise ValueError(
                f"hidden_dim {self.hidden_dim} not divisible by n_heads {self.n_heads}"
            )
        if self.n_blocks < 2:
            raise ValueError("need at least two blocks")
        if min(self.vocab_size, self.seq_len, self.hidden_dim, self.n_heads) < 1:
            raise ValueError("config dimensions must be positive")

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.n_heads


def param_shapes(cfg: LmConfig) -> dict[str, tuple[int, ...]]:
    """Canonical parameter names and shapes, in canonical order."""
    d, v, s = cfg.hidden_dim, cfg.vocab_size, cfg.seq_len
    shapes: dict[str, tuple[int, ...]] = {
        "tok_emb": (v, d),
        "pos_emb": (s, d),
    }
    for i in range(cfg.n_blocks):
        p = f"block{i}"
        shapes[f"{p}.ln1.gain"] = (d,)
        shapes[f"{p}.ln1.bias"] = (d,)
        for nm in ("wq", "wk", "wv", "wo"):
            shapes[f"{p}.attn.{nm}"] = (d, d)
            shapes[f"{p}.attn.{nm[-1]}b"] = (d,)
        shapes[f"{p}.ln2.gain"] = (d,)
        shapes[f"{p}.ln2.bias"] = (d,)
        shapes[f"{p}.mlp.w1"] = (d, 4 * d)
        shapes[f"{p}.mlp.b1"] = (4 * d,)
        shapes[f"{p}.mlp.w2"] = (4 * d, d)
        shapes[f"{p}.mlp.b2"] = (d,)
    shapes["final_ln.gain"] = (d,)
    shapes["final_ln.bias"] = (d,)
    shapes["head.w"] = (d, v)
    shapes["head.b"] = (v,)
    return shapes


def init_params(cfg: LmConfig) -> ParamTree:
    """Deterministic init: matrices from a fan-in-scaled normal, embeddings
    at std 0.02, biases zero, layer-norm gains one."""
    rng = np.random.default_rng(cfg.seed)
    params: ParamTree = {}
    for name, shape in param_shapes(cfg).items():
        if name in ("tok_emb", "pos_emb"):
            params[name] = rng.normal(0.0, 0.02, size=shape)
        elif name.endswith(".gain"):
            params[name] = np.ones(shape)
        elif len(shape) == 1:
            params[name] = np.zeros(shape)
        else:
            params[name] = rng.normal(0.0, 1.0 / np.sqrt(shape[0]), size=shape)
    return params


def _linear(x: Tensor, pt: dict[str, Tensor], w: str, b: str) -> Tensor:
    return ad.add(ad.matmul(x, pt[w]), pt[b])


def _block(x: Tensor, pt: dict[str, Tensor], prefix: str, cfg: LmConfig, mask: np.ndarray) -> Tensor:
    b, t, d = x.shape
    h, hd = cfg.n_heads, cfg.head_dim

    a = ad.layer_norm(x, pt[f"{prefix}.ln1.gain"], pt[f"{prefix}.ln1.bias"])
    q = _linear(a, pt, f"{prefix}.attn.wq", f"{prefix}.attn.qb")
    k = _linear(a, pt, f"{prefix}.attn.wk", f"{prefix}.attn.kb")
    v = _linear(a, pt, f"{prefix}.attn.wv", f"{prefix}.attn.vb")
    # [B, T, D] -> [B, H, T, hd]; the 1/sqrt(hd) scale rides on q, which is
    # much smaller than the [B, H, T, T] score array
    q = ad.scale(ad.transpose(ad.reshape(q, (b, t, h, hd)), (0, 2, 1, 3)), 1.0 / np.sqrt(hd))
    k = ad.transpose(ad.reshape(k, (b, t, h, hd)), (0, 2, 1, 3))
    v = ad.transpose(ad.reshape(v, (b, t, h, hd)), (0, 2, 1, 3))
    scores = ad.matmul(q, ad.transpose(k, (0, 1, 3, 2)))
    attn = ad.masked_softmax(scores, mask)
    o = ad.matmul(attn, v)  # [B, H, T, hd]
    o = ad.reshape(ad.transpose(o, (0, 2, 1, 3)), (b, t, d))
    x = ad.add(x, _linear(o, pt, f"{prefix}.attn.wo", f"{prefix}.attn.ob"))

    a2 = ad.layer_norm(x, pt[f"{prefix}.ln2.gain"], pt[f"{prefix}.ln2.bias"])
    m = ad.gelu(_linear(a2, pt, f"{prefix}.mlp.w1", f"{prefix}.mlp.b1"))
    return ad.add(x, _linear(m, pt, f"{prefix}.mlp.w2", f"{prefix}.mlp.b2"))


def _check_tokens(tokens: np.ndarray, cfg: LmConfig) -> np.ndarray:
    tokens = np.asarray(tokens)
    if tokens.ndim not in (1, 2):
        raise ValueError("tokens must be a sequence or a batch of sequences")
    if tokens.shape[-1] > cfg.seq_len:
        raise ValueError(f"sequence length {tokens.shape[-1]} exceeds seq_len {cfg.seq_len}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab_size):
        raise ValueError("token id out of range")
    return tokens


def _as_ptensors(params) -> dict[str, Tensor]:
    if params and isinstance(next(iter(params.values())), Tensor):
        return params
    return ad.wrap_params(params)


def _forward_hidden(tokens: np.ndarray, pt: dict[str, Tensor], cfg: LmConfig) -> Tensor:
    """Run all blocks; returns last-block hidden states [B, T, D]."""
    t = tokens.shape[-1]
    batched = tokens if tokens.ndim == 2 else tokens[None, :]
    x = ad.add(ad.gather(pt["tok_emb"], batched), ad.gather(pt["pos_emb"], np.arange(t)))
    mask = np.triu(np.full((t, t), MASK_NEG), k=1)
    for i in range(cfg.n_blocks):
        x = _block(x, pt, f"block{i}", cfg, mask)
    return x


def forward_lm(tokens: np.ndarray, params, cfg: LmConfig) -> Tensor:
    """Logits for next-token prediction; [T, V] for a single sequence and
    [B, T, V] for a batch. params may be a ParamTree or wrapped tensors."""
    tokens = _check_tokens(tokens, cfg)
    pt = _as_ptensors(params)
    x = _forward_hidden(tokens, pt, cfg)
    f = ad.layer_norm(x, pt["final_ln.gain"], pt["final_ln.bias"])
    logits = ad.add(ad.matmul(f, pt["head.w"]), pt["head.b"])
    if tokens.ndim == 1:
        logits = ad.reshape(logits, logits.shape[1:])
    return logits


def hidden_features(tokens: np.ndarray, params, cfg: LmConfig, normed: bool = False) -> np.ndarray:
    """Per-token hidden features from the last block, [T, D] (or [B, T, D]).

    normed=False returns the raw block output (default used for routing);
    normed=True applies the final layer norm first.
    """
    tokens = _check_tokens(tokens, cfg)
    pt = _as_ptensors(params)
    x = _forward_hidden(tokens, pt, cfg)
    if normed:
        x = ad.layer_norm(x, pt["final_ln.gain"], pt["final_ln.bias"])
    out = x.data
    return out[0] if tokens.ndim == 1 else out


def lm_loss(logits: Tensor | np.ndarray, targets: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean negative log-likelihood over mask-selected positions."""
    return ad.cross_entropy(ad.as_tensor(logits), targets, mask)


def backward(loss: Tensor, ptensors: dict[str, Tensor]) -> ParamTree:
    """Gradient of a forward-graph loss w.r.t. the wrapped parameters."""
    return ad.param_grads(loss, ptensors)


def shift_targets(tokens: np.ndarray, prefix_len: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Standard LM shift: inputs tokens[..., :-1], targets tokens[..., 1:].

    The mask scores exactly the tokens with index >= prefix_len, i.e. all but
    the routing prefix.
    """
    tokens = np.asarray(tokens)
    inputs, targets = tokens[..., :-1], tokens[..., 1:]
    t = tokens.shape[-1]
    if prefix_len >= t:
        raise ValueError("prefix covers the whole sequence; nothing to score")
    pos_mask = np.arange(1, t) >= prefix_len
    mask = np.broadcast_to(pos_mask, targets.shape)
    return inputs, targets, mask


def batch_loss(tokens: np.ndarray, ptensors: dict[str, Tensor], cfg: LmConfig, prefix_len: int) -> Tensor:
    """Differentiable mean NLL of a [B, T] batch, prefix excluded."""
    inputs, targets, mask = shift_targets(tokens, prefix_len)
    return lm_loss(forward_lm(inputs, ptensors, cfg), targets, mask)


def sequence_nll(tokens: np.ndarray, params, cfg: LmConfig, prefix_len: int) -> tuple[float, int]:
    """(total NLL, scored-token count) of one sequence, prefix excluded."""
    inputs, targets, mask = shift_targets(tokens, prefix_len)
    loss = lm_loss(forward_lm(inputs, params, cfg), targets, mask)
    n = int(mask.sum())
    return loss.item() * n, n


def token_logprobs(tokens: np.ndarray, params, cfg: LmConfig) -> np.ndarray:
    """log p(token_j | tokens_<j) for j in [0, T); position 0 is fixed at 0."""
    tokens = np.asarray(tokens)
    logits = forward_lm(tokens[:-1], params, cfg).data
    zmax = logits.max(axis=-1, keepdims=True)
    logp = logits - (zmax + np.log(np.exp(logits - zmax).sum(axis=-1, keepdims=True)))
    out = np.zeros(tokens.shape[0])
    out[1:] = logp[np.arange(tokens.shape[0] - 1), tokens[1:]]
    return out


# ---------------------------------------------------------------------------
# golden-logit file: text header with shape dims, then packed little-endian
# float64 payload
# ---------------------------------------------------------------------------


def save_golden(path: str | Path, arr: np.ndarray) -> None:
    arr = np.asarray(arr, dtype=np.float64)
    with open(path, "wb") as f:
        f.write(b"golden 1\n")
        f.write((" ".join(str(d) for d in arr.shape) + "\n").encode())
        f.write(arr.astype("<f8").tobytes())


def load_golden(path: str | Path) -> np.ndarray:
    with open(path, "rb") as f:
        magic = f.readline()
        if magic != b"golden 1\n":
            raise ValueError(f"not a golden file: {path}")
        shape = tuple(int(x) for x in f.readline().split())
        data = np.frombuffer(f.read(), dtype="<f8")
    return data.reshape(shape).astype(np.float64)
