"""Token-factored scorers: per-node scalar scores for a canvas.

``CausalScorer`` is a small seeded Transformer encoder (numpy, float32) with
a linear head. It honours whatever attention mask the canvas carries, so the
same weights serve whole-lattice passes and one-hypothesis-at-a-time passes.
"""

from __future__ import annotations

import math
import threading
from dataclasses import asdict, dataclass, fields
from pathlib import Path as FilePath
from typing import Mapping, Sequence

import numpy as np

from .lattice import BOS_TOKEN, Lattice
from .masking import Canvas, path_canvas

DEFAULT_LAMBDA = 0.75
_NEG = np.float32(-1e9)


@dataclass(frozen=True)
class ScorerSpec:
    vocab_size: int = 1024
    d_model: int = 32
    n_layers: int = 2
    n_heads: int = 2
    d_ff: int = 64
    max_position: int = 512
    seed: int = 0

    def __post_init__(self):
        for f in fields(self):
            if f.name != "seed" and getattr(self, f.name) < 1:
                raise ValueError(f"{f.name} must be >= 1")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")

    def to_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in asdict(self).items())

    @classmethod
    def from_text(cls, text: str) -> ScorerSpec:
        known = {f.name for f in fields(cls)}
        kw = {}
        for line in text.splitlines():
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, val = line.partition("=")
            key = key.strip()
            if not sep or key not in known:
                raise ValueError(f"bad scorer spec line: {line!r}")
            kw[key] = int(val)
        return cls(**kw)


@dataclass
class TokenScores:
    per_node: dict[int, float]
    hidden: dict[int, np.ndarray] | None = None

    def __getitem__(self, node_id: int) -> float:
        return self.per_node[node_id]

    def restrict(self, node_ids) -> TokenScores:
        keep = set(node_ids)
        hid = None if self.hidden is None else {k: v for k, v in self.hidden.items() if k in keep}
        return TokenScores({k: v for k, v in self.per_node.items() if k in keep}, hid)


class TokenScorer:
    """Common accounting for scorers that consume canvases.

    ``tokens_encoded`` counts canvas slots pushed through the scorer and
    ``passes`` counts calls; both are updated under a lock so concurrent
    encodes keep exact totals.
    """

    def __init__(self):
        self._lock = threading.Lock()
        self.tokens_encoded = 0
        self.passes = 0

    def _account(self, n: int) -> None:
        with self._lock:
            self.tokens_encoded += n
            self.passes += 1

    def encode(self, canvas: Canvas, *, keep_hidden: bool = False) -> TokenScores:
        raise NotImplementedError

    def encode_path(self, lattice: Lattice, node_ids: Sequence[int], *, keep_hidden: bool = False) -> TokenScores:
        """Score one hypothesis on its own, with ordinary sequential positions."""
        return self.encode(path_canvas(lattice, node_ids), keep_hidden=keep_hidden)

    @property
    def max_lattice_position(self) -> int:
        raise NotImplementedError


class LookupScorer(TokenScorer):
    """Context-free scorer: each token id maps to a fixed seeded value."""

    def __init__(self, vocab_size: int = 1024, seed: int = 0, table: Sequence[float] | None = None):
        super().__init__()
        if table is None:
            table = np.random.default_rng(seed).uniform(-1.0, 1.0, size=vocab_size)
        self.table = np.asarray(table, dtype=np.float64)

    @property
    def max_lattice_position(self) -> int:
        return 2**31 - 1

    def encode(self, canvas, *, keep_hidden=False):
        if len(canvas) and canvas.tokens.max() >= len(self.table):
            raise ValueError("token id outside the lookup table")
        self._account(len(canvas))
        return TokenScores({v: float(self.table[t]) for v, t in zip(canvas.node_order, canvas.tokens)})


@dataclass
class _Prefix:
    """Per-layer inputs of slots every canvas slot may attend to."""

    states: list[np.ndarray]
    length: int


class CausalScorer(TokenScorer):
    """Seeded post-LN Transformer encoder with a scalar linear head.

    With ``source`` tokens the scorer conditions on an input sequence: the
    source occupies positions 0..len-1 ahead of every canvas and is visible to
    every canvas slot; lattice positions are shifted up by its length.
    """

    def __init__(self, spec: ScorerSpec = ScorerSpec(), *, source: Sequence[int] | None = None,
                 zero_head: bool = False):
        super().__init__()
        self.spec = spec
        rng = np.random.default_rng(spec.seed)
        d, f = spec.d_model, spec.d_ff

        def u(*shape):
            return rng.uniform(-0.08, 0.08, size=shape).astype(np.float32)

        self.tok_emb = u(spec.vocab_size, d)
        self.pos_emb = u(spec.max_position, d)
        self.layers = []
        for _ in range(spec.n_layers):
            self.layers.append({
                "wq": u(d, d), "bq": u(d), "wk": u(d, d), "bk": u(d),
                "wv": u(d, d), "bv": u(d), "wo": u(d, d), "bo": u(d),
                "ln1_g": np.ones(d, np.float32), "ln1_b": np.zeros(d, np.float32),
                "w1": u(d, f), "b1": u(f), "w2": u(f, d), "b2": u(d),
                "ln2_g": np.ones(d, np.float32), "ln2_b": np.zeros(d, np.float32),
            })
        self.head_w = u(d)
        self.head_b = u(1)
        if zero_head:
            self.head_w[:] = 0
            self.head_b[:] = 0
        self.source = tuple(int(t) for t in source or ())
        self._check_tokens(np.asarray(self.source, dtype=np.int64))
        self._source = self._build_prefix(self.source) if self.source else None
        # begin-of-sequence context for single-hypothesis passes
        self._bos = self._build_prefix(self.source + (BOS_TOKEN,))

    @property
    def offset(self) -> int:
        return len(self.source)

    @property
    def max_lattice_position(self) -> int:
        return self.spec.max_position - 1 - self.offset

    # -------------------------------------------------------------- internals

    def _check_tokens(self, toks: np.ndarray) -> None:
        if toks.size and (toks.min() < 0 or toks.max() >= self.spec.vocab_size):
            raise ValueError(f"token id out of range [0, {self.spec.vocab_size})")

    @staticmethod
    def _ln(x, g, b, eps=1e-5):
        mu = x.mean(-1, keepdims=True)
        var = ((x - mu) ** 2).mean(-1, keepdims=True)
        return (x - mu) / np.sqrt(var + np.float32(eps)) * g + b

    @staticmethod
    def _gelu(x):
        c = np.float32(math.sqrt(2.0 / math.pi))
        return np.float32(0.5) * x * (np.float32(1.0) + np.tanh(c * (x + np.float32(0.044715) * x**3)))

    def _forward(self, toks, pos, mask, prefix: _Prefix | None):
        n = len(toks)
        H = self.spec.n_heads
        dh = self.spec.d_model // H
        scale = np.float32(1.0 / math.sqrt(dh))
        if prefix is not None and prefix.length:
            mask = np.concatenate([np.ones((n, prefix.length), bool), mask], axis=1)
        bias = np.where(mask, np.float32(0.0), _NEG).astype(np.float32)

        h = self.tok_emb[toks] + self.pos_emb[pos]
        inputs = []
        for li, L in enumerate(self.layers):
            inputs.append(h)
            kv = h if prefix is None or not prefix.length else np.concatenate([prefix.states[li], h])
            q = (h @ L["wq"] + L["bq"]).reshape(n, H, dh).transpose(1, 0, 2)
            k = (kv @ L["wk"] + L["bk"]).reshape(len(kv), H, dh).transpose(1, 0, 2)
            v = (kv @ L["wv"] + L["bv"]).reshape(len(kv), H, dh).transpose(1, 0, 2)
            logits = (q @ k.transpose(0, 2, 1)) * scale + bias
            logits -= logits.max(-1, keepdims=True)
            w = np.exp(logits)
            w /= w.sum(-1, keepdims=True)
            att = (w @ v).transpose(1, 0, 2).reshape(n, -1) @ L["wo"] + L["bo"]
            h = self._ln(h + att, L["ln1_g"], L["ln1_b"])
            ff = self._gelu(h @ L["w1"] + L["b1"]) @ L["w2"] + L["b2"]
            h = self._ln(h + ff, L["ln2_g"], L["ln2_b"])
        return h, inputs

    def _build_prefix(self, toks: Sequence[int]) -> _Prefix:
        n = len(toks)
        _, inputs = self._forward(np.asarray(toks, dtype=np.int64), np.arange(n),
                                  np.tril(np.ones((n, n), bool)), None)
        return _Prefix(inputs, n)

    def _head(self, h: np.ndarray) -> np.ndarray:
        return h @ self.head_w + self.head_b[0]

    # ----------------------------------------------------------------- public

    def encode(self, canvas: Canvas, *, keep_hidden: bool = False) -> TokenScores:
        """One encoder pass over the whole canvas."""
        return self._encode(canvas, self._source, self.offset, keep_hidden)

    def encode_path(self, lattice, node_ids, *, keep_hidden=False):
        """Score one hypothesis on its own.

        The begin-of-sequence slot comes from a cached prefix, so only the
        hypothesis tokens are pushed through the encoder.
        """
        canvas = path_canvas(lattice, node_ids, include_root=False)
        return self._encode(canvas, self._bos, self.offset, keep_hidden)

    def _encode(self, canvas: Canvas, prefix, offset: int, keep_hidden: bool) -> TokenScores:
        n = len(canvas)
        mask = np.asarray(canvas.mask, dtype=bool)
        if mask.shape != (n, n):
            raise ValueError(f"mask shape {mask.shape} does not match canvas length {n}")
        if len(canvas.tokens) != n or len(canvas.positions) != n:
            raise ValueError("tokens/positions do not match the canvas length")
        toks = np.asarray(canvas.tokens, dtype=np.int64)
        pos = np.asarray(canvas.positions, dtype=np.int64) + offset
        self._check_tokens(toks)
        if n and (pos.min() < 0 or pos.max() >= self.spec.max_position):
            raise ValueError(f"position id out of range [0, {self.spec.max_position})")
        self._account(n)
        h, _ = self._forward(toks, pos, mask, prefix)
        s = self._head(h)
        per_node = {v: float(x) for v, x in zip(canvas.node_order, s)}
        hidden = {v: h[i] for i, v in enumerate(canvas.node_order)} if keep_hidden else None
        return TokenScores(per_node, hidden)

    def encode_sequence(self, tokens: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
        """Plain causal pass over ``tokens`` at positions 0..n-1.

        Returns (scores, hidden). Independent of canvases and prefix caching,
        which makes it the reference for equivalence checks.
        """
        toks = np.asarray(tokens, dtype=np.int64)
        n = len(toks)
        self._check_tokens(toks)
        h, _ = self._forward(toks, np.arange(n) + self.offset,
                             np.tril(np.ones((n, n), bool)), self._source)
        return self._head(h), h

    # ---------------------------------------------------------- weight dumps

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {"tok_emb": self.tok_emb, "pos_emb": self.pos_emb,
               "head_w": self.head_w, "head_b": self.head_b}
        for i, L in enumerate(self.layers):
            out.update({f"layer{i}.{k}": v for k, v in L.items()})
        return out

    def save_weights(self, path: str | FilePath) -> None:
        np.savez(path, **self.state_dict())

    def load_weights(self, path: str | FilePath) -> None:
        with np.load(path) as data:
            for key, arr in self.state_dict().items():
                if data[key].shape != arr.shape:
                    raise ValueError(f"weight {key}: shape {data[key].shape} != {arr.shape}")
                arr[...] = data[key]
        if self.source:
            self._source = self._build_prefix(self.source)
        self._bos = self._build_prefix(self.source + (BOS_TOKEN,))


def model_score(lattice: Lattice, node_ids=None) -> TokenScores:
    """Per-node base-model log-probabilities as scores."""
    nodes = lattice.node_map
    ids = nodes if node_ids is None else node_ids
    return TokenScores({v: nodes[v].logprob for v in ids})


def ensemble(tfr: TokenScores, model: TokenScores, lam: float = DEFAULT_LAMBDA) -> TokenScores:
    """Node-wise ``tfr + lam * model``."""
    if tfr.per_node.keys() != model.per_node.keys():
        raise ValueError("ensemble needs identical node domains")
    return TokenScores({v: s + lam * model.per_node[v] for v, s in tfr.per_node.items()}, tfr.hidden)


def aggregate(path: Sequence[int], scores: TokenScores | Mapping[int, float]) -> tuple[float, float]:
    """(sum of node scores, sum / node count) over a root-excluded path."""
    if not path:
        raise ValueError("empty path")
    table = scores.per_node if isinstance(scores, TokenScores) else scores
    try:
        raw = float(sum(table[v] for v in path))
    except KeyError as exc:
        raise ValueError(f"node {exc.args[0]} on the path has no score") from None
    return raw, raw / len(path)
