"""Desk-scale transformer LM and seq2seq built on the bounded-memory attention.

Pre-norm blocks, ReLU feed-forward, learned token and position embeddings,
no biases outside layer norms.  Parameters live in one flat name -> array
dict (every array 2-D), which keeps the optimizer, the gradient checks and
the checkpoint container uniform.  The backward pass is the same manual
chain style as the attention module.

Training tasks are synthetic (copy, reverse) or a character LM over a plain
UTF-8 corpus.  Sequences reserve token 0 as BOS and token 1 as the separator;
payload symbols use the rest of the vocabulary.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .attention import (
    AttentionConfig,
    AttnState,
    LayerParams,
    StrategySpec,
    fold_outer,
    init_attn_state,
    init_strategy_weights,
    mha_backward,
    mha_forward,
    stream_step,
)
from .numerics import check_finite, make_rng, softmax_rows

LN_EPS = 1e-5
BOS, SEP = 0, 1


class TrainingDiverged(RuntimeError):
    """Loss became non-finite during training."""


@dataclass(frozen=True)
class SiteSpec:
    strategy: StrategySpec
    n: int


@dataclass(frozen=True)
class ToyModelConfig:
    layers: int = 2
    d_model: int = 64
    heads: int = 4
    ffn_mult: int = 4
    vocab: int = 32
    max_positions: int = 130
    causal: SiteSpec = SiteSpec(StrategySpec(kind="softmax"), 1)
    encoder: SiteSpec | None = None  # seq2seq only
    cross: SiteSpec | None = None  # seq2seq only
    temperature: float | None = None  # None -> sqrt(d_head)
    tie_phi_across_layers: bool = True
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 1.0
    warmup_steps: int = 100
    batch_size: int = 8
    seed: int = 0

    def site_config(self, site: str) -> AttentionConfig:
        spec = {"causal": self.causal, "encoder_self": self.encoder, "cross": self.cross}[site]
        if spec is None:
            raise ValueError(f"model has no {site} attention configured")
        return AttentionConfig(
            heads=self.heads,
            d_model=self.d_model,
            d_head=self.d_model // self.heads,
            site=site,
            strategy=spec.strategy,
            n=spec.n,
            temperature=self.temperature,
            tie_phi_across_layers=self.tie_phi_across_layers,
        )


@dataclass(frozen=True)
class TaskSpec:
    kind: str  # copy | reverse | char_lm
    min_len: int = 64
    max_len: int = 64
    vocab: int = 32
    corpus_path: str | None = None

    def __post_init__(self):
        if self.kind not in ("copy", "reverse", "char_lm"):
            raise ValueError(f"unknown task {self.kind!r}")
        if self.min_len > self.max_len or self.min_len < 1:
            raise ValueError("bad length range")


# --- parameter init -------------------------------------------------------------


def _ln_params(params, name, d):
    params[f"{name}.g"] = np.ones((1, d))
    params[f"{name}.b"] = np.zeros((1, d))


def _block_params(params, prefix, cfg: ToyModelConfig, rng, sites):
    d, mult = cfg.d_model, cfg.ffn_mult
    scale = 1.0 / np.sqrt(d)
    _ln_params(params, f"{prefix}.ln1", d)
    for site_name, _ in sites:
        for w in ("wq", "wk", "wv", "wo"):
            params[f"{prefix}.{site_name}.{w}"] = rng.normal(0.0, scale, (d, d))
    if len(sites) > 1:
        _ln_params(params, f"{prefix}.ln_cross", d)
    _ln_params(params, f"{prefix}.ln2", d)
    params[f"{prefix}.ffn.w1"] = rng.normal(0.0, scale, (d, mult * d))
    params[f"{prefix}.ffn.w2"] = rng.normal(0.0, 1.0 / np.sqrt(mult * d), (mult * d, d))


def _strategy_param_keys(cfg: ToyModelConfig, stack: str, site: str, layers: int):
    """Names of the strategy-weight arrays for one attention site."""
    att = cfg.site_config(site)
    if not att.strategy.needs_weights():
        return {}
    if cfg.tie_phi_across_layers:
        return {i: f"phi.{site}" for i in range(layers)}
    return {i: f"{stack}{i}.{'attn' if site != 'cross' else 'cross'}.sw" for i in range(layers)}


class _Stack:
    """Shared forward/backward machinery for a block stack (encoder or decoder)."""

    def __init__(self, model, prefix, sites):
        self.model = model
        self.prefix = prefix  # "enc" or "dec"
        self.sites = sites  # [("attn", causal/encoder_self cfg), ("cross", cfg)?]

    def layer_params(self, i, site_name) -> LayerParams:
        p = self.model.params
        base = f"{self.prefix}{i}.{site_name}"
        key = self.model.strategy_keys.get((self.prefix, site_name), {}).get(i)
        return LayerParams(
            wq=p[f"{base}.wq"],
            wk=p[f"{base}.wk"],
            wv=p[f"{base}.wv"],
            wo=p[f"{base}.wo"],
            strategy_weights=p[key] if key else None,
        )


# --- layer norm and ffn ------------------------------------------------------------


def layer_norm_forward(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * inv
    return g * xhat + b, (xhat, inv, g)


def layer_norm_backward(dy, cache):
    xhat, inv, g = cache
    dxhat = dy * g
    axes = tuple(range(dy.ndim - 1))
    dg = (dy * xhat).sum(axis=axes).reshape(1, -1)
    db = dy.sum(axis=axes).reshape(1, -1)
    dx = inv * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    return dx, dg, db


def ffn_forward(h, w1, w2):
    z = h @ w1
    r = np.maximum(z, 0.0)
    return r @ w2, (h, z, r)


def ffn_backward(df, cache, w1, w2):
    h, z, r = cache
    dw2 = fold_outer(r, df)
    dr = df @ w2.T
    dz = dr * (z > 0.0)
    dw1 = fold_outer(h, dz)
    return dz @ w1.T, dw1, dw2


# --- the decoder-only language model -------------------------------------------------


@dataclass
class DecoderState:
    """Streaming decode state: per-layer attention memories plus the position."""

    attn: list[AttnState]
    cross: list[AttnState] | None = None
    pos: int = 0

    def size_bytes(self) -> int:
        total = sum(s.size_bytes() for s in self.attn)
        if self.cross is not None:
            total += sum(s.size_bytes() for s in self.cross)
        return total


class ToyLM:
    """Decoder-only LM: embeddings, pre-norm blocks with causal attention."""

    def __init__(self, config: ToyModelConfig, rng: np.random.Generator | None = None):
        self.config = config
        rng = rng if rng is not None else make_rng(config.seed)
        cfg = config
        d = cfg.d_model
        params: dict[str, np.ndarray] = {}
        params["tok_emb"] = rng.normal(0.0, 0.02, (cfg.vocab, d))
        params["pos_emb"] = rng.normal(0.0, 0.02, (cfg.max_positions, d))
        sites = [("attn", cfg.site_config("causal"))]
        for i in range(cfg.layers):
            _block_params(params, f"dec{i}", cfg, rng, sites)
        _ln_params(params, "final_ln", d)
        params["out_w"] = rng.normal(0.0, 0.02, (d, cfg.vocab))
        self.params = params
        self.strategy_keys = {("dec", "attn"): _strategy_param_keys(cfg, "dec", "causal", cfg.layers)}
        for keys in self.strategy_keys.values():
            for i, key in keys.items():
                if key not in params:
                    params[key] = init_strategy_weights(cfg.site_config("causal"), rng)
        self.stack = _Stack(self, "dec", sites)

    # -- bookkeeping

    def param_count(self) -> int:
        return sum(a.size for a in self.params.values())

    def strategy_param_count(self) -> int:
        return sum(
            a.size for k, a in self.params.items() if k.startswith("phi.") or k.endswith(".sw")
        )

    def zero_grads(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.params.items()}

    # -- batch paths

    def forward(self, tokens):
        tokens = np.asarray(tokens)
        if tokens.ndim == 1:
            tokens = tokens[None, :]
        B, N = tokens.shape
        cfg = self.config
        if N > cfg.max_positions:
            raise ValueError(f"sequence length {N} exceeds max positions {cfg.max_positions}")
        if tokens.min() < 0 or tokens.max() >= cfg.vocab:
            raise ValueError("token id outside vocabulary")
        p = self.params
        x = p["tok_emb"][tokens] + p["pos_emb"][:N]
        att_cfg = cfg.site_config("causal")
        tape = {"tokens": tokens, "layers": []}
        for i in range(cfg.layers):
            lt = {}
            h, lt["ln1"] = layer_norm_forward(x, p[f"dec{i}.ln1.g"], p[f"dec{i}.ln1.b"])
            a, lt["att"], _ = mha_forward(h, None, self.stack.layer_params(i, "attn"), att_cfg)
            x = x + a
            h2, lt["ln2"] = layer_norm_forward(x, p[f"dec{i}.ln2.g"], p[f"dec{i}.ln2.b"])
            f, lt["ffn"] = ffn_forward(h2, p[f"dec{i}.ffn.w1"], p[f"dec{i}.ffn.w2"])
            x = x + f
            tape["layers"].append(lt)
        xf, tape["final_ln"] = layer_norm_forward(x, p["final_ln.g"], p["final_ln.b"])
        tape["xf"] = xf
        logits = xf @ p["out_w"]
        return check_finite(logits, "logits"), tape

    def backward(self, tape, dlogits) -> dict[str, np.ndarray]:
        p = self.params
        grads = self.zero_grads()
        tokens = tape["tokens"]
        N = tokens.shape[1]
        grads["out_w"] = fold_outer(tape["xf"], dlogits)
        dx, dg, db = layer_norm_backward(dlogits @ p["out_w"].T, tape["final_ln"])
        grads["final_ln.g"], grads["final_ln.b"] = dg, db
        for i in reversed(range(self.config.layers)):
            lt = tape["layers"][i]
            dh2, dw1, dw2 = ffn_backward(dx, lt["ffn"], p[f"dec{i}.ffn.w1"], p[f"dec{i}.ffn.w2"])
            grads[f"dec{i}.ffn.w1"] += dw1
            grads[f"dec{i}.ffn.w2"] += dw2
            dres, dg, db = layer_norm_backward(dh2, lt["ln2"])
            grads[f"dec{i}.ln2.g"] += dg
            grads[f"dec{i}.ln2.b"] += db
            dx = dx + dres
            agrads, dh, _ = mha_backward(lt["att"], dx)
            for w in ("wq", "wk", "wv", "wo"):
                grads[f"dec{i}.attn.{w}"] += agrads[w]
            key = self.strategy_keys[("dec", "attn")].get(i)
            if key is not None:
                grads[key] += agrads["strategy_weights"]
            dres, dg, db = layer_norm_backward(dh, lt["ln1"])
            grads[f"dec{i}.ln1.g"] += dg
            grads[f"dec{i}.ln1.b"] += db
            dx = dx + dres
        grads["pos_emb"][:N] = dx.sum(axis=0)
        np.add.at(grads["tok_emb"], tokens, dx)
        return grads

    # -- streaming paths

    def init_state(self, batch: int, capacity: int | None = None) -> DecoderState:
        cfg = self.config
        capacity = cfg.max_positions if capacity is None else capacity
        att_cfg = cfg.site_config("causal")
        return DecoderState(
            attn=[
                init_attn_state(att_cfg, self.stack.layer_params(i, "attn"), batch, capacity)
                for i in range(cfg.layers)
            ]
        )

    def step(self, tokens_t, state: DecoderState):
        """One streaming step: tokens_t (B,) -> logits (B, vocab)."""
        p = self.params
        cfg = self.config
        tokens_t = np.asarray(tokens_t).reshape(-1)
        if state.pos >= cfg.max_positions:
            raise ValueError("decode ran past max positions")
        x = p["tok_emb"][tokens_t] + p["pos_emb"][state.pos]
        att_cfg = cfg.site_config("causal")
        for i in range(cfg.layers):
            h, _ = layer_norm_forward(x, p[f"dec{i}.ln1.g"], p[f"dec{i}.ln1.b"])
            x = x + stream_step(h, self.stack.layer_params(i, "attn"), att_cfg, state.attn[i])
            h2, _ = layer_norm_forward(x, p[f"dec{i}.ln2.g"], p[f"dec{i}.ln2.b"])
            z = h2 @ p[f"dec{i}.ffn.w1"]
            x = x + np.maximum(z, 0.0) @ p[f"dec{i}.ffn.w2"]
        xf, _ = layer_norm_forward(x, p["final_ln.g"], p["final_ln.b"])
        state.pos += 1
        return xf @ p["out_w"]


def forward_lm(tokens, model: ToyLM):
    """Batch logits for a (B, N) or (N,) token array, plus the gradient tape."""
    return model.forward(tokens)


# --- loss -----------------------------------------------------------------------


def masked_cross_entropy(logits, targets, mask):
    """Mean NLL of ``targets`` over mask-weighted positions.

    ``logits`` (B, T, V), ``targets``/``mask`` (B, T); masked-out targets are
    ignored entirely.  Returns (loss, accuracy, dlogits).
    """
    B, T, _ = logits.shape
    m = np.asarray(mask, dtype=np.float64)
    total = m.sum()
    if total <= 0:
        raise ValueError("empty loss mask")
    probs = softmax_rows(logits)
    bidx = np.arange(B)[:, None]
    tidx = np.arange(T)[None, :]
    picked = probs[bidx, tidx, targets]
    loss = float(-(np.log(np.maximum(picked, 1e-300)) * m).sum() / total)
    acc = float(((probs.argmax(axis=-1) == targets) * m).sum() / total)
    d = probs.copy()
    d[bidx, tidx, targets] -= 1.0
    dlogits = d * (m / total)[:, :, None]
    return loss, acc, dlogits


def next_token_loss(logits, tokens, mask):
    """LM wrapper: mask[b, t] weights predicting tokens[b, t+1].

    The final position has no target; its mask entry must be zero.
    """
    if np.any(np.asarray(mask)[:, -1] != 0):
        raise ValueError("last position has no next token; mask it out")
    targets = np.zeros_like(tokens)
    targets[:, :-1] = tokens[:, 1:]
    return masked_cross_entropy(logits, targets, mask)


# --- tasks ------------------------------------------------------------------------


class TaskSampler:
    """Draws (tokens, mask) batches for a task; every batch shares one length."""

    def __init__(self, spec: TaskSpec):
        self.spec = spec
        self.ids = None
        if spec.kind == "char_lm":
            if spec.corpus_path is None:
                raise ValueError("char_lm needs a corpus path")
            text = Path(spec.corpus_path).read_text(encoding="utf-8")
            chars = sorted(set(text))
            if len(chars) > spec.vocab:
                raise ValueError(f"corpus has {len(chars)} symbols, vocab is {spec.vocab}")
            self.stoi = {c: i for i, c in enumerate(chars)}
            self.itos = chars
            self.ids = np.array([self.stoi[c] for c in text], dtype=np.intp)
            if len(self.ids) <= spec.max_len + 1:
                raise ValueError("corpus shorter than one training window")

    def sequence_length(self, payload_len: int) -> int:
        return 2 * payload_len + 2 if self.spec.kind != "char_lm" else self.spec.max_len + 1

    def sample(self, batch: int, rng: np.random.Generator):
        spec = self.spec
        if spec.kind == "char_lm":
            N = spec.max_len + 1
            starts = rng.integers(0, len(self.ids) - N, size=batch)
            tokens = np.stack([self.ids[s : s + N] for s in starts])
            mask = np.ones((batch, N))
            mask[:, -1] = 0.0
            return tokens, mask
        L = int(rng.integers(spec.min_len, spec.max_len + 1))
        payload = rng.integers(2, spec.vocab, size=(batch, L))
        answer = payload[:, ::-1] if spec.kind == "reverse" else payload
        N = 2 * L + 2
        tokens = np.zeros((batch, N), dtype=np.intp)
        tokens[:, 0] = BOS
        tokens[:, 1 : L + 1] = payload
        tokens[:, L + 1] = SEP
        tokens[:, L + 2 :] = answer
        mask = np.zeros((batch, N))
        mask[:, L + 1 : 2 * L + 1] = 1.0  # positions predicting the answer tokens
        return tokens, mask

    def sample_pair(self, batch: int, rng: np.random.Generator):
        """Source/target form of copy or reverse for the seq2seq model.

        Returns (src, tgt_in, tgt_out, mask): the decoder is teacher-forced
        with BOS-shifted targets and every position is supervised.
        """
        spec = self.spec
        if spec.kind == "char_lm":
            raise ValueError("char_lm is a decoder-only task")
        L = int(rng.integers(spec.min_len, spec.max_len + 1))
        src = rng.integers(2, spec.vocab, size=(batch, L))
        tgt_out = src[:, ::-1] if spec.kind == "reverse" else src
        tgt_in = np.concatenate(
            [np.full((batch, 1), BOS, dtype=np.intp), tgt_out[:, :-1]], axis=1
        )
        return src, tgt_in, tgt_out, np.ones((batch, L))


def evaluate_accuracy(model: ToyLM, sampler: TaskSampler, batches: int, rng) -> float:
    """Next-token accuracy over masked positions on freshly drawn batches."""
    hits, total = 0.0, 0.0
    for _ in range(batches):
        tokens, mask = sampler.sample(model.config.batch_size, rng)
        logits, _ = model.forward(tokens)
        pred = logits[:, :-1].argmax(axis=-1)
        m = mask[:, :-1]
        hits += ((pred == tokens[:, 1:]) * m).sum()
        total += m.sum()
    return float(hits / total)


def evaluate_perplexity(model: ToyLM, sampler: TaskSampler, batches: int, rng) -> float:
    """exp(mean masked token NLL), the standard LM quality number."""
    nll, total = 0.0, 0.0
    for _ in range(batches):
        tokens, mask = sampler.sample(model.config.batch_size, rng)
        logits, _ = model.forward(tokens)
        loss, _, _ = next_token_loss(logits, tokens, mask)
        nll += loss * mask.sum()
        total += mask.sum()
    return float(np.exp(nll / total))


# --- training -----------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0


def adam_init(model) -> AdamState:
    return AdamState(
        m={k: np.zeros_like(v) for k, v in model.params.items()},
        v={k: np.zeros_like(v) for k, v in model.params.items()},
    )


def adam_update(model, grads, opt: AdamState):
    cfg = model.config
    opt.t += 1
    lr = cfg.lr
    if cfg.warmup_steps > 0:
        lr *= min(1.0, opt.t / cfg.warmup_steps)
    if cfg.clip_norm > 0:
        norm = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
        if norm > cfg.clip_norm:
            scale = cfg.clip_norm / norm
            grads = {k: g * scale for k, g in grads.items()}
    b1, b2, eps = cfg.beta1, cfg.beta2, cfg.eps
    c1 = 1.0 - b1**opt.t
    c2 = 1.0 - b2**opt.t
    for k, g in grads.items():
        opt.m[k] = b1 * opt.m[k] + (1.0 - b1) * g
        opt.v[k] = b2 * opt.v[k] + (1.0 - b2) * (g * g)
        model.params[k] -= lr * (opt.m[k] / c1) / (np.sqrt(opt.v[k] / c2) + eps)


def train_step(model: ToyLM, tokens, mask, opt: AdamState):
    logits, tape = model.forward(tokens)
    loss, acc, dlogits = next_token_loss(logits, tokens, mask)
    if not np.isfinite(loss):
        raise TrainingDiverged(f"loss is {loss} at optimizer step {opt.t}")
    grads = model.backward(tape, dlogits)
    adam_update(model, grads, opt)
    return loss, acc


def seq2seq_train_step(model: "ToySeq2Seq", src, tgt_in, tgt_out, mask, opt: AdamState):
    logits, tape = model.forward(src, tgt_in)
    loss, acc, dlogits = masked_cross_entropy(logits, tgt_out, mask)
    if not np.isfinite(loss):
        raise TrainingDiverged(f"loss is {loss} at optimizer step {opt.t}")
    grads = model.backward(tape, dlogits)
    adam_update(model, grads, opt)
    return loss, acc


def train(model, task: TaskSpec, steps: int, rng: np.random.Generator):
    """Adam training loop; returns the per-step (step, loss, accuracy) curve.

    Works for both the decoder-only LM (next-token loss over the task mask)
    and the seq2seq model (teacher-forced source/target pairs).  Deterministic
    given the generator; zero steps leave the parameters untouched.
    Non-finite loss raises TrainingDiverged.
    """
    sampler = TaskSampler(task)
    opt = adam_init(model)
    curve = []
    seq2seq = isinstance(model, ToySeq2Seq)
    for step_i in range(steps):
        if seq2seq:
            src, tgt_in, tgt_out, mask = sampler.sample_pair(model.config.batch_size, rng)
            loss, acc = seq2seq_train_step(model, src, tgt_in, tgt_out, mask, opt)
        else:
            tokens, mask = sampler.sample(model.config.batch_size, rng)
            loss, acc = train_step(model, tokens, mask, opt)
        curve.append((step_i + 1, loss, acc))
    return curve


def evaluate_seq2seq_accuracy(model: "ToySeq2Seq", sampler: TaskSampler, batches: int, rng) -> float:
    """Teacher-forced per-token accuracy on freshly drawn source/target pairs."""
    hits, total = 0.0, 0.0
    for _ in range(batches):
        src, tgt_in, tgt_out, mask = sampler.sample_pair(model.config.batch_size, rng)
        logits, _ = model.forward(src, tgt_in)
        hits += ((logits.argmax(axis=-1) == tgt_out) * mask).sum()
        total += mask.sum()
    return float(hits / total)


def save_curve_csv(path, curve) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write("step,loss,accuracy\n")
        for step_i, loss, acc in curve:
            f.write(f"{step_i},{loss!r},{acc!r}\n")


# --- greedy decoding ---------------------------------------------------------------


def greedy_decode(model, prefix, max_len: int):
    """Greedy continuation using the streaming state.

    ``prefix`` is (B, P) or (P,) token ids (ToyLM), or the source batch for
    a seq2seq model.  Returns the (B, max_len) generated ids; argmax breaks
    ties toward the lowest token id.
    """
    if isinstance(model, ToySeq2Seq):
        return model.greedy_decode(prefix, max_len)
    prefix = np.asarray(prefix)
    if prefix.ndim == 1:
        prefix = prefix[None, :]
    B, P = prefix.shape
    state = model.init_state(B, capacity=min(P + max_len, model.config.max_positions))
    logits = None
    for t in range(P):
        logits = model.step(prefix[:, t], state)
    out = np.zeros((B, 0), dtype=np.intp)
    for _ in range(max_len):
        nxt = logits.argmax(axis=-1)
        out = np.concatenate([out, nxt[:, None]], axis=1)
        if out.shape[1] == max_len:
            break
        logits = model.step(nxt, state)
    return out


# --- sequence-to-sequence ------------------------------------------------------------


class ToySeq2Seq:
    """Encoder-decoder exercising all three attention sites.

    The encoder runs self-attention blocks over the source; the decoder
    interleaves causal self-attention, cross attention over the encoder
    output, and the feed-forward, then projects to the vocabulary.
    """

    def __init__(self, config: ToyModelConfig, rng: np.random.Generator | None = None):
        if config.encoder is None or config.cross is None:
            raise ValueError("seq2seq needs encoder and cross site configs")
        self.config = config
        rng = rng if rng is not None else make_rng(config.seed)
        cfg = config
        d = cfg.d_model
        params: dict[str, np.ndarray] = {}
        params["tok_emb"] = rng.normal(0.0, 0.02, (cfg.vocab, d))
        params["pos_emb"] = rng.normal(0.0, 0.02, (cfg.max_positions, d))
        enc_sites = [("attn", cfg.site_config("encoder_self"))]
        dec_sites = [("attn", cfg.site_config("causal")), ("cross", cfg.site_config("cross"))]
        for i in range(cfg.layers):
            _block_params(params, f"enc{i}", cfg, rng, enc_sites)
        _ln_params(params, "enc_final_ln", d)
        for i in range(cfg.layers):
            _block_params(params, f"dec{i}", cfg, rng, dec_sites)
        _ln_params(params, "final_ln", d)
        params["out_w"] = rng.normal(0.0, 0.02, (d, cfg.vocab))
        self.params = params
        self.strategy_keys = {
            ("enc", "attn"): _strategy_param_keys(cfg, "enc", "encoder_self", cfg.layers),
            ("dec", "attn"): _strategy_param_keys(cfg, "dec", "causal", cfg.layers),
            ("dec", "cross"): _strategy_param_keys(cfg, "dec", "cross", cfg.layers),
        }
        for (stack, site_name), keys in self.strategy_keys.items():
            site = {"enc": "encoder_self", "dec": "causal"}[stack] if site_name == "attn" else "cross"
            for i, key in keys.items():
                if key not in params:
                    params[key] = init_strategy_weights(cfg.site_config(site), rng)
        self.enc_stack = _Stack(self, "enc", enc_sites)
        self.dec_stack = _Stack(self, "dec", dec_sites)

    def param_count(self) -> int:
        return sum(a.size for a in self.params.values())

    def strategy_param_count(self) -> int:
        return sum(
            a.size for k, a in self.params.items() if k.startswith("phi.") or k.endswith(".sw")
        )

    def zero_grads(self):
        return {k: np.zeros_like(v) for k, v in self.params.items()}

    def encode(self, src):
        p = self.params
        cfg = self.config
        src = np.asarray(src)
        if src.ndim == 1:
            src = src[None, :]
        x = p["tok_emb"][src] + p["pos_emb"][: src.shape[1]]
        att_cfg = cfg.site_config("encoder_self")
        tape = {"src": src, "layers": []}
        for i in range(cfg.layers):
            lt = {}
            h, lt["ln1"] = layer_norm_forward(x, p[f"enc{i}.ln1.g"], p[f"enc{i}.ln1.b"])
            a, lt["att"], _ = mha_forward(h, None, self.enc_stack.layer_params(i, "attn"), att_cfg)
            x = x + a
            h2, lt["ln2"] = layer_norm_forward(x, p[f"enc{i}.ln2.g"], p[f"enc{i}.ln2.b"])
            f, lt["ffn"] = ffn_forward(h2, p[f"enc{i}.ffn.w1"], p[f"enc{i}.ffn.w2"])
            x = x + f
            tape["layers"].append(lt)
        out, tape["final_ln"] = layer_norm_forward(x, p["enc_final_ln.g"], p["enc_final_ln.b"])
        return out, tape

    def forward(self, src, tgt):
        p = self.params
        cfg = self.config
        enc_out, enc_tape = self.encode(src)
        tgt = np.asarray(tgt)
        if tgt.ndim == 1:
            tgt = tgt[None, :]
        x = p["tok_emb"][tgt] + p["pos_emb"][: tgt.shape[1]]
        causal_cfg = cfg.site_config("causal")
        cross_cfg = cfg.site_config("cross")
        tape = {"enc": enc_tape, "tgt": tgt, "layers": []}
        for i in range(cfg.layers):
            lt = {}
            h, lt["ln1"] = layer_norm_forward(x, p[f"dec{i}.ln1.g"], p[f"dec{i}.ln1.b"])
            a, lt["att"], _ = mha_forward(h, None, self.dec_stack.layer_params(i, "attn"), causal_cfg)
            x = x + a
            hc, lt["ln_cross"] = layer_norm_forward(x, p[f"dec{i}.ln_cross.g"], p[f"dec{i}.ln_cross.b"])
            c, lt["cross"], _ = mha_forward(
                hc, enc_out, self.dec_stack.layer_params(i, "cross"), cross_cfg
            )
            x = x + c
            h2, lt["ln2"] = layer_norm_forward(x, p[f"dec{i}.ln2.g"], p[f"dec{i}.ln2.b"])
            f, lt["ffn"] = ffn_forward(h2, p[f"dec{i}.ffn.w1"], p[f"dec{i}.ffn.w2"])
            x = x + f
            tape["layers"].append(lt)
        xf, tape["final_ln"] = layer_norm_forward(x, p["final_ln.g"], p["final_ln.b"])
        tape["xf"] = xf
        logits = xf @ p["out_w"]
        return check_finite(logits, "logits"), tape

    def backward(self, tape, dlogits):
        p = self.params
        cfg = self.config
        grads = self.zero_grads()
        tgt = tape["tgt"]
        grads["out_w"] = fold_outer(tape["xf"], dlogits)
        dx, dg, db = layer_norm_backward(dlogits @ p["out_w"].T, tape["final_ln"])
        grads["final_ln.g"], grads["final_ln.b"] = dg, db
        d_enc = None
        for i in reversed(range(cfg.layers)):
            lt = tape["layers"][i]
            dh2, dw1, dw2 = ffn_backward(dx, lt["ffn"], p[f"dec{i}.ffn.w1"], p[f"dec{i}.ffn.w2"])
            grads[f"dec{i}.ffn.w1"] += dw1
            grads[f"dec{i}.ffn.w2"] += dw2
            dres, dg, db = layer_norm_backward(dh2, lt["ln2"])
            grads[f"dec{i}.ln2.g"] += dg
            grads[f"dec{i}.ln2.b"] += db
            dx = dx + dres
            cgrads, dhc, denc_i = mha_backward(lt["cross"], dx)
            for w in ("wq", "wk", "wv", "wo"):
                grads[f"dec{i}.cross.{w}"] += cgrads[w]
            ckey = self.strategy_keys[("dec", "cross")].get(i)
            if ckey is not None:
                grads[ckey] += cgrads["strategy_weights"]
            d_enc = denc_i if d_enc is None else d_enc + denc_i
            dres, dg, db = layer_norm_backward(dhc, lt["ln_cross"])
            grads[f"dec{i}.ln_cross.g"] += dg
            grads[f"dec{i}.ln_cross.b"] += db
            dx = dx + dres
            agrads, dh, _ = mha_backward(lt["att"], dx)
            for w in ("wq", "wk", "wv", "wo"):
                grads[f"dec{i}.attn.{w}"] += agrads[w]
            akey = self.strategy_keys[("dec", "attn")].get(i)
            if akey is not None:
                grads[akey] += agrads["strategy_weights"]
            dres, dg, db = layer_norm_backward(dh, lt["ln1"])
            grads[f"dec{i}.ln1.g"] += dg
            grads[f"dec{i}.ln1.b"] += db
            dx = dx + dres
        grads["pos_emb"][: tgt.shape[1]] += dx.sum(axis=0)
        np.add.at(grads["tok_emb"], tgt, dx)

        # back through the encoder
        enc_tape = tape["enc"]
        src = enc_tape["src"]
        dx, dg, db = layer_norm_backward(d_enc, enc_tape["final_ln"])
        grads["enc_final_ln.g"], grads["enc_final_ln.b"] = dg, db
        for i in reversed(range(cfg.layers)):
            lt = enc_tape["layers"][i]
            dh2, dw1, dw2 = ffn_backward(dx, lt["ffn"], p[f"enc{i}.ffn.w1"], p[f"enc{i}.ffn.w2"])
            grads[f"enc{i}.ffn.w1"] += dw1
            grads[f"enc{i}.ffn.w2"] += dw2
            dres, dg, db = layer_norm_backward(dh2, lt["ln2"])
            grads[f"enc{i}.ln2.g"] += dg
            grads[f"enc{i}.ln2.b"] += db
            dx = dx + dres
            agrads, dh, _ = mha_backward(lt["att"], dx)
            for w in ("wq", "wk", "wv", "wo"):
                grads[f"enc{i}.attn.{w}"] += agrads[w]
            akey = self.strategy_keys[("enc", "attn")].get(i)
            if akey is not None:
                grads[akey] += agrads["strategy_weights"]
            dres, dg, db = layer_norm_backward(dh, lt["ln1"])
            grads[f"enc{i}.ln1.g"] += dg
            grads[f"enc{i}.ln1.b"] += db
            dx = dx + dres
        grads["pos_emb"][: src.shape[1]] += dx.sum(axis=0)
        np.add.at(grads["tok_emb"], src, dx)
        return grads

    def init_state(self, src) -> DecoderState:
        cfg = self.config
        src = np.asarray(src)
        if src.ndim == 1:
            src = src[None, :]
        enc_out, _ = self.encode(src)
        causal_cfg = cfg.site_config("causal")
        cross_cfg = cfg.site_config("cross")
        return DecoderState(
            attn=[
                init_attn_state(
                    causal_cfg, self.dec_stack.layer_params(i, "attn"), src.shape[0], cfg.max_positions
                )
                for i in range(cfg.layers)
            ],
            cross=[
                init_attn_state(
                    cross_cfg,
                    self.dec_stack.layer_params(i, "cross"),
                    src.shape[0],
                    cfg.max_positions,
                    encoder_out=enc_out,
                )
                for i in range(cfg.layers)
            ],
        )

    def step(self, tokens_t, state: DecoderState):
        p = self.params
        cfg = self.config
        tokens_t = np.asarray(tokens_t).reshape(-1)
        x = p["tok_emb"][tokens_t] + p["pos_emb"][state.pos]
        causal_cfg = cfg.site_config("causal")
        cross_cfg = cfg.site_config("cross")
        for i in range(cfg.layers):
            h, _ = layer_norm_forward(x, p[f"dec{i}.ln1.g"], p[f"dec{i}.ln1.b"])
            x = x + stream_step(h, self.dec_stack.layer_params(i, "attn"), causal_cfg, state.attn[i])
            hc, _ = layer_norm_forward(x, p[f"dec{i}.ln_cross.g"], p[f"dec{i}.ln_cross.b"])
            x = x + stream_step(hc, self.dec_stack.layer_params(i, "cross"), cross_cfg, state.cross[i])
            h2, _ = layer_norm_forward(x, p[f"dec{i}.ln2.g"], p[f"dec{i}.ln2.b"])
            z = h2 @ p[f"dec{i}.ffn.w1"]
            x = x + np.maximum(z, 0.0) @ p[f"dec{i}.ffn.w2"]
        xf, _ = layer_norm_forward(x, p["final_ln.g"], p["final_ln.b"])
        state.pos += 1
        return xf @ p["out_w"]

    def greedy_decode(self, src, max_len: int):
        src = np.asarray(src)
        if src.ndim == 1:
            src = src[None, :]
        state = self.init_state(src)
        tok = np.full(src.shape[0], BOS, dtype=np.intp)
        out = np.zeros((src.shape[0], 0), dtype=np.intp)
        for _ in range(max_len):
            logits = self.step(tok, state)
            tok = logits.argmax(axis=-1)
            out = np.concatenate([out, tok[:, None]], axis=1)
        return out


def seq2seq_loss_and_grads(model: ToySeq2Seq, src, tgt_in, tgt_out, mask=None):
    """Teacher-forced loss + grads; tgt_out aligns position-wise with tgt_in."""
    logits, tape = model.forward(src, tgt_in)
    if mask is None:
        mask = np.ones(tgt_out.shape)
    loss, acc, dlogits = masked_cross_entropy(logits, tgt_out, mask)
    grads = model.backward(tape, dlogits)
    return loss, acc, grads
