"""Token generators: prompt conditioning, a Markov oracle, a tiny causal model.

Both generators honor the same contract: `generate(ctx, count, params)` emits
exactly `count` token ids, fully determined by the prompt, the prefix tokens,
and the RNG stream id. The random draw for the token at absolute position t
(prefix length + tokens emitted so far) is a pure hash of
(prompt digest, stream id, t), which makes a generation splittable: emitting
a tokens and then continuing with those a tokens appended to the prefix yields
the same sequence as emitting a+b tokens in one call.

The Markov generator is the deterministic desk-scale stand-in for a pretrained
token backbone; its transitions put more mass on nearby token ids, so raster
continuity is statistically visible in decoded pixels. The tiny causal model
is a single-stage attention + feed-forward network trained with the standard
next-token negative log-likelihood.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from itertools import product

import numpy as np

from .errors import (
    CapacityError,
    CodebookError,
    ConfigError,
    InputError,
    TrainingError,
)

PROMPT_DIM = 64  # stand-in text embedding width
PMDL_MAGIC = b"PMDL"
PMDL_VERSION = 1
PMDL_KIND_CAUSAL = 1
PMDL_KIND_MARKOV = 2

_U64 = (1 << 64) - 1


@dataclass(frozen=True)
class PromptEmbedding:
    """Unit-norm embedding deterministically derived from a prompt string."""

    source_text: str
    values: np.ndarray

    @property
    def digest(self) -> int:
        return _text_digest(self.source_text)


def _text_digest(text: str) -> int:
    h = hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(h, "little")


def encode_prompt(text: str) -> PromptEmbedding:
    """Hash a prompt into a reproducible unit-norm vector of PROMPT_DIM values."""
    if not text:
        raise InputError("prompt text must be non-empty")
    rng = np.random.default_rng(_text_digest(text))
    values = rng.standard_normal(PROMPT_DIM)
    values /= np.linalg.norm(values)
    values.setflags(write=False)
    return PromptEmbedding(text, values)


@dataclass(frozen=True)
class SamplingParams:
    temperature: float = 1.0
    top_k: int = 0  # 0 disables top-k filtering
    seed: int = 0

    def __post_init__(self):
        if self.temperature <= 0:
            raise ConfigError(f"temperature must be positive, got {self.temperature}")
        if self.top_k < 0:
            raise ConfigError(f"top_k must be >= 0, got {self.top_k}")


@dataclass(frozen=True)
class ConditioningContext:
    """What a generation call sees: prompt, token prefix, RNG stream key.

    stream_id is (global seed, block index, row index); each distinct tuple is
    an independent random stream.
    """

    prompt: PromptEmbedding | None
    prefix_tokens: tuple[int, ...]
    stream_id: tuple[int, int, int]

    def __post_init__(self):
        if self.prompt is None and not self.prefix_tokens:
            raise ConfigError("conditioning needs a prompt or a token prefix")


def stream_uniform(prompt_digest: int, stream_id: tuple[int, int, int], position: int) -> float:
    """Uniform [0,1) draw for one token; pure function of its arguments."""
    material = struct.pack(
        "<5Q",
        prompt_digest & _U64,
        stream_id[0] & _U64,
        stream_id[1] & _U64,
        stream_id[2] & _U64,
        position & _U64,
    )
    h = hashlib.blake2b(material, digest_size=8).digest()
    return int.from_bytes(h, "little") / 2.0**64


def _sample(probs: np.ndarray, params: SamplingParams, u: float) -> int:
    """Inverse-CDF sample after temperature scaling and optional top-k."""
    k = probs.shape[0]
    if params.top_k > k:
        raise ConfigError(f"top_k {params.top_k} exceeds codebook size {k}")
    if params.temperature != 1.0:
        probs = probs ** (1.0 / params.temperature)
    if params.top_k:
        # deterministic selection: ties broken toward lower token ids
        order = np.lexsort((np.arange(k), -probs))
        keep = np.zeros(k, dtype=bool)
        keep[order[: params.top_k]] = True
        probs = np.where(keep, probs, 0.0)
    cdf = np.cumsum(probs)
    cdf /= cdf[-1]
    return int(min(np.searchsorted(cdf, u, side="right"), k - 1))


class MarkovGenerator:
    """Order-k Markov chain over token ids, seeded from the prompt embedding.

    Transition mass decays exponentially with |next - last| so consecutive
    tokens tend to stay close in id space; a prompt-seeded multiplicative
    jitter makes different prompts produce different tables. Contexts shorter
    than the order fall back to the same rule on the shorter context
    (effective order = available context length).
    """

    def __init__(self, codebook_size: int, order: int, prompt: PromptEmbedding):
        if codebook_size < 2:
            raise ConfigError(f"codebook size must be >= 2, got {codebook_size}")
        if order < 1:
            raise ConfigError(f"order must be >= 1, got {order}")
        self.codebook_size = codebook_size
        self.order = order
        self.prompt = prompt
        self.capacity = None  # no context limit
        self._locality = max(1.0, codebook_size / 32.0)
        self._rows: dict[tuple, np.ndarray] = {}

    def _row(self, digest: int, context: tuple[int, ...]) -> np.ndarray:
        """Next-token distribution for a (possibly shortened) context."""
        key = (digest, context)
        row = self._rows.get(key)
        if row is not None:
            return row
        k = self.codebook_size
        if context:
            rng = np.random.default_rng(np.random.SeedSequence([digest, 1, *context]))
            dist = np.abs(np.arange(k, dtype=np.float64) - context[-1])
            row = np.exp(-dist / self._locality) * rng.uniform(0.5, 1.5, k)
        else:
            rng = np.random.default_rng(np.random.SeedSequence([digest, 0]))
            row = rng.uniform(0.1, 1.0, k)
        row /= row.sum()
        row.setflags(write=False)
        self._rows[key] = row
        return row

    def initial_distribution(self, prompt: PromptEmbedding | None = None) -> np.ndarray:
        digest = (prompt or self.prompt).digest
        return self._row(digest, ())

    def transition_row(self, context: tuple[int, ...], prompt: PromptEmbedding | None = None):
        digest = (prompt or self.prompt).digest
        return self._row(digest, tuple(context)[-self.order :])

    def transition_table(self, prompt: PromptEmbedding | None = None) -> np.ndarray:
        """Materialized (K^order, K) table, contexts in lexicographic order."""
        k = self.codebook_size
        if k**self.order > 65536:
            raise ConfigError(
                f"table of {k}^{self.order} contexts is too large to materialize"
            )
        digest = (prompt or self.prompt).digest
        return np.stack(
            [self._row(digest, ctx) for ctx in product(range(k), repeat=self.order)]
        )

    def generate(
        self, ctx: ConditioningContext, count: int, params: SamplingParams
    ) -> tuple[int, ...]:
        if count < 1:
            raise ConfigError(f"token count must be >= 1, got {count}")
        if ctx.prefix_tokens and max(ctx.prefix_tokens) >= self.codebook_size:
            raise CodebookError("prefix token outside the codebook")
        digest = (ctx.prompt or self.prompt).digest
        seq = list(ctx.prefix_tokens)
        out = []
        for _ in range(count):
            context = tuple(seq[-self.order :])
            probs = self._row(digest, context)
            u = stream_uniform(digest, ctx.stream_id, len(seq))
            token = _sample(probs, params, u)
            seq.append(token)
            out.append(token)
        return tuple(out)


class TinyCausalModel:
    """Minimal trainable next-token model: one causal attention + tanh FFN stage.

    Parameters (all float64): token embedding we (K, m), positional embedding
    pe (L, m), attention projections wq/wk/wv/wp (m, m), feed-forward w1
    (m, 4m) + b1, w2 (4m, m) + b2, output projection wo (m, K). Residual
    connections around both sub-stages; no normalization layers.

    The prompt does not enter the logits (there is no text pathway); it only
    seeds the sampling stream, matching the seed/bias role it plays here.
    """

    def __init__(self, codebook_size: int, window: int, model_dim: int = 8, seed: int = 0):
        if codebook_size < 2:
            raise ConfigError(f"codebook size must be >= 2, got {codebook_size}")
        if window < 2:
            raise ConfigError(f"context window must be >= 2, got {window}")
        if model_dim < 1:
            raise ConfigError(f"model dim must be >= 1, got {model_dim}")
        self.codebook_size = codebook_size
        self.window = window
        self.model_dim = model_dim
        self.capacity = window
        k, L, m, f = codebook_size, window, model_dim, 4 * model_dim
        rng = np.random.default_rng(seed)
        init = lambda *shape: rng.standard_normal(shape) * 0.1
        self.we = init(k, m)
        self.pe = init(L, m)
        self.wq = init(m, m)
        self.wk = init(m, m)
        self.wv = init(m, m)
        self.wp = init(m, m)
        self.w1 = init(m, f)
        self.b1 = np.zeros(f)
        self.w2 = init(f, m)
        self.b2 = np.zeros(m)
        self.wo = init(m, k)

    _PARAM_ORDER = ("we", "pe", "wq", "wk", "wv", "wp", "w1", "b1", "w2", "b2", "wo")

    def parameters(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in self._PARAM_ORDER}

    def forward(self, tokens) -> np.ndarray:
        """Logits (T, K) for a token sequence of length T <= window."""
        logits, _ = self._forward(tokens)
        return logits

    def probabilities(self, tokens) -> np.ndarray:
        return _softmax_rows(self.forward(tokens))

    def _forward(self, tokens):
        t = np.asarray(tokens, dtype=np.intp)
        if t.size == 0:
            raise ConfigError("forward pass needs at least one token")
        if t.size > self.window:
            raise CapacityError(f"sequence of {t.size} exceeds window {self.window}")
        if int(t.max()) >= self.codebook_size:
            raise CodebookError("token id outside the codebook")
        n = t.size
        m = self.model_dim
        x = self.we[t] + self.pe[:n]
        q = x @ self.wq
        kk = x @ self.wk
        v = x @ self.wv
        scores = (q @ kk.T) / np.sqrt(m)
        scores = np.where(np.triu(np.ones((n, n), dtype=bool), k=1), -np.inf, scores)
        attn = _softmax_rows(scores)
        mixed = attn @ v
        h = x + mixed @ self.wp
        pre = h @ self.w1 + self.b1
        u = np.tanh(pre)
        z = h + u @ self.w2 + self.b2
        logits = z @ self.wo
        return logits, (t, x, q, kk, v, attn, mixed, h, u, z)

    def _loss_and_grads(self, tokens):
        logits, cache = self._forward(tokens)
        t, x, q, kk, v, attn, mixed, h, u, z = cache
        n = t.size
        probs = _softmax_rows(logits)
        loss = 0.0
        dlogits = np.zeros_like(logits)
        for i in range(n - 1):
            loss -= np.log(probs[i, t[i + 1]])
            dlogits[i] = probs[i]
            dlogits[i, t[i + 1]] -= 1.0

        g = {name: np.zeros_like(p) for name, p in self.parameters().items()}
        g["wo"] = z.T @ dlogits
        dz = dlogits @ self.wo.T
        dh = dz.copy()
        du = dz @ self.w2.T
        g["w2"] = u.T @ dz
        g["b2"] = dz.sum(axis=0)
        dpre = du * (1.0 - u**2)
        g["w1"] = h.T @ dpre
        g["b1"] = dpre.sum(axis=0)
        dh += dpre @ self.w1.T
        dx = dh.copy()
        g["wp"] = mixed.T @ dh
        dmixed = dh @ self.wp.T
        dattn = dmixed @ v.T
        dv = attn.T @ dmixed
        dscores = attn * (dattn - (dattn * attn).sum(axis=1, keepdims=True))
        dscores /= np.sqrt(self.model_dim)
        dq = dscores @ kk
        dkk = dscores.T @ q
        g["wq"] = x.T @ dq
        g["wk"] = x.T @ dkk
        g["wv"] = x.T @ dv
        dx += dq @ self.wq.T + dkk @ self.wk.T + dv @ self.wv.T
        np.add.at(g["we"], t, dx)
        g["pe"][:n] = dx
        return loss, g

    def generate(
        self, ctx: ConditioningContext, count: int, params: SamplingParams
    ) -> tuple[int, ...]:
        if count < 1:
            raise ConfigError(f"token count must be >= 1, got {count}")
        if ctx.prefix_tokens and max(ctx.prefix_tokens) >= self.codebook_size:
            raise CodebookError("prefix token outside the codebook")
        digest = ctx.prompt.digest if ctx.prompt is not None else 0
        k = self.codebook_size
        seq = list(ctx.prefix_tokens)
        out = []
        uniform = np.full(k, 1.0 / k)
        for _ in range(count):
            window = seq[-self.window :]
            if window:
                probs = _softmax_rows(self.forward(window)[-1:])[0]
            else:
                probs = uniform  # cold start: no tokens to attend over
            u = stream_uniform(digest, ctx.stream_id, len(seq))
            token = _sample(probs, params, u)
            seq.append(token)
            out.append(token)
        return tuple(out)


def _softmax_rows(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def nll_loss(model: TinyCausalModel, sequence) -> float:
    """Next-token negative log-likelihood, summed over positions 2..n."""
    seq = tuple(int(t) for t in sequence)
    if len(seq) < 2:
        raise ConfigError("loss needs a sequence of at least 2 tokens")
    logits = model.forward(seq)
    probs = _softmax_rows(logits)
    return float(-sum(np.log(probs[i, seq[i + 1]]) for i in range(len(seq) - 1)))


def train_tiny(
    model: TinyCausalModel, corpus, epochs: int, lr: float
) -> tuple[TinyCausalModel, list[float]]:
    """Full-batch gradient descent on the mean sequence loss.

    Returns the trained model (updated in place) and the loss curve: the mean
    loss before each update plus one final post-training entry, so the curve
    has epochs + 1 points.
    """
    sequences = [tuple(int(t) for t in seq) for seq in corpus]
    if not sequences:
        raise TrainingError("corpus is empty")
    for seq in sequences:
        if len(seq) < 2:
            raise TrainingError("corpus sequences must have at least 2 tokens")
        if len(seq) > model.window:
            raise TrainingError(
                f"sequence of {len(seq)} exceeds the model window {model.window}"
            )
    if lr < 0:
        raise ConfigError(f"learning rate must be >= 0, got {lr}")

    curve = []
    params = model.parameters()
    for epoch in range(epochs):
        total = {name: np.zeros_like(p) for name, p in params.items()}
        mean_loss = 0.0
        for seq in sequences:
            loss, grads = model._loss_and_grads(seq)
            mean_loss += loss
            for name in total:
                total[name] += grads[name]
        mean_loss /= len(sequences)
        if not np.isfinite(mean_loss):
            raise TrainingError(f"loss diverged to {mean_loss} at epoch {epoch}")
        curve.append(mean_loss)
        for name, p in params.items():
            p -= (lr / len(sequences)) * total[name]
    final = sum(nll_loss(model, seq) for seq in sequences) / len(sequences)
    if not np.isfinite(final):
        raise TrainingError(f"loss diverged to {final} after the final update")
    curve.append(final)
    return model, curve


def write_pmdl(obj, path, prompt: PromptEmbedding | None = None) -> None:
    """PMDL v1 container for a TinyCausalModel or a Markov transition table.

    Header: magic 'PMDL', version byte, kind byte. Kind 1 (causal model)
    stores u32-LE window/K/m then the parameter tensors in declaration order
    as float64-LE. Kind 2 (markov) stores u32-LE K/order then the K^order x K
    table row-major as float64-LE.
    """
    payload = bytearray()
    payload += PMDL_MAGIC
    payload += struct.pack("<B", PMDL_VERSION)
    if isinstance(obj, TinyCausalModel):
        payload += struct.pack("<B", PMDL_KIND_CAUSAL)
        payload += struct.pack("<III", obj.window, obj.codebook_size, obj.model_dim)
        for name in TinyCausalModel._PARAM_ORDER:
            payload += getattr(obj, name).astype("<f8").tobytes()
    elif isinstance(obj, MarkovGenerator):
        payload += struct.pack("<B", PMDL_KIND_MARKOV)
        payload += struct.pack("<II", obj.codebook_size, obj.order)
        payload += obj.transition_table(prompt).astype("<f8").tobytes()
    else:
        raise ConfigError(f"cannot serialize {type(obj).__name__} to PMDL")
    with open(path, "wb") as fh:
        fh.write(bytes(payload))


def read_pmdl(path):
    """Read a PMDL v1 file; returns a TinyCausalModel or (K, order, table)."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 6 or data[:4] != PMDL_MAGIC:
        raise InputError(f"{path}: not a PMDL file")
    if data[4] != PMDL_VERSION:
        raise InputError(f"{path}: unsupported PMDL version {data[4]}")
    kind = data[5]
    if kind == PMDL_KIND_CAUSAL:
        window, k, m = struct.unpack_from("<III", data, 6)
        model = TinyCausalModel(k, window, m)
        offset = 18
        for name in TinyCausalModel._PARAM_ORDER:
            shape = getattr(model, name).shape
            n = int(np.prod(shape))
            tensor = np.frombuffer(data, dtype="<f8", count=n, offset=offset)
            setattr(model, name, tensor.reshape(shape).copy())
            offset += 8 * n
        if offset != len(data):
            raise InputError(f"{path}: trailing bytes in checkpoint")
        return model
    if kind == PMDL_KIND_MARKOV:
        k, order = struct.unpack_from("<II", data, 6)
        n = k**order * k
        table = np.frombuffer(data, dtype="<f8", count=n, offset=14).reshape(k**order, k)
        if 14 + 8 * n != len(data):
            raise InputError(f"{path}: trailing bytes in table")
        return k, order, table.copy()
    raise InputError(f"{path}: unknown PMDL kind {kind}")
