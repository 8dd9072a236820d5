"""Target-conditioned autoregressive peptide decoder.

Every decoder layer runs causal self-attention over the peptide prefix,
cross-attention over the projected frozen target encoding and a
feed-forward block, each wrapped in residual + layer norm. The output layer
is zero-initialised, so an untrained model is uniform over the scorable
vocabulary.

Scorable vocabulary: the 20 residues, X and EOS. PAD and BOS are never
predicted; X is additionally banned when sampling.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import tensor as T
from .corpus import PairExample
from .nn import Adam, FeedForward, LayerNorm, Linear, Module, MultiHeadAttention
from .sequences import (BOS, EOS, GEN_VOCAB, PAD, PEPTIDE_LEN, X_TOKEN, SequenceRecord, detokenize, format_fasta,
                        tokenize)
from .storage import Checkpoint, CheckpointError, diff_names, write_container
from .tensor import Tensor

log = logging.getLogger(__name__)

TARGET_MAX = 500
GEN_STAGE = "decoder"
SCORABLE = np.ones(GEN_VOCAB, dtype=bool)
SCORABLE[[PAD, BOS]] = False


class MalformedPrefixError(ValueError):
    pass


class TargetTooLongError(ValueError):
    def __init__(self, target_id: str, length: int, cap: int):
        super().__init__(f"target {target_id!r} has {length} residues; the generator accepts at most {cap}")
        self.target_id = target_id


class TrainingDiverged(FloatingPointError):
    def __init__(self, epoch: int, batch: int):
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch


@dataclass
class GenConfig:
    d_embed: int = 64
    d_model: int = 64
    layers: int = 2
    heads: int = 2
    d_ff: int = 128
    max_peptide: int = PEPTIDE_LEN
    max_target: int = TARGET_MAX
    lr: float = 1e-3
    batch_size: int = 16
    epochs: int = 50
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ValueError(f"heads={self.heads} must divide d_model={self.d_model}")
        if self.layers < 1:
            raise ValueError("decoder needs at least one layer")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "GenConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown generator config keys: {sorted(unknown)}")
        return cls(**d)


class TargetEncoder:
    """Frozen target encodings, cached per (id, residues)."""

    def __init__(self, source, max_len: int = TARGET_MAX):
        self.source = source
        self.max_len = max_len
        self._cache: dict = {}
        self.hits = 0

    def __call__(self, record: SequenceRecord):
        if len(record) > self.max_len:
            raise TargetTooLongError(record.id, len(record), self.max_len)
        key = (record.id, record.residues)
        hit = self._cache.get(key)
        if hit is not None:
            self.hits += 1
            return hit
        emb = self.source.embed_record(record, len(record))
        self._cache[key] = emb
        return emb


class _Layer(Module):
    def __init__(self, cfg: GenConfig, rng):
        super().__init__()
        d = cfg.d_model
        self.self_attn = self.child("self_attn", MultiHeadAttention(d, cfg.heads, rng))
        self.norm1 = self.child("norm1", LayerNorm(d))
        self.cross_attn = self.child("cross_attn", MultiHeadAttention(d, cfg.heads, rng))
        self.norm2 = self.child("norm2", LayerNorm(d))
        self.ffn = self.child("ffn", FeedForward(d, cfg.d_ff, rng))
        self.norm3 = self.child("norm3", LayerNorm(d))

    def __call__(self, x: Tensor, pep_valid, target: Tensor, target_valid):
        sa, _ = self.self_attn(x, x, key_valid=pep_valid, causal=True)
        x = self.norm1(T.add(x, sa))
        ca, w = self.cross_attn(x, target, key_valid=target_valid)
        x = self.norm2(T.add(x, ca))
        x = self.norm3(T.add(x, self.ffn(x)))
        return x, w


class PepGenModel(Module):
    def __init__(self, config: GenConfig, seed: int = 0):
        super().__init__()
        self.config = config
        self.seed = seed
        cfg = config
        d = cfg.d_model
        rng = np.random.default_rng([seed, 0x6E])
        self.tok = self.param("tok", rng.standard_normal((GEN_VOCAB, d)) * 0.1)
        self.pos = self.param("pos", rng.standard_normal((cfg.max_peptide + 1, d)) * 0.1)
        self.target_proj = self.child("target_proj", Linear(cfg.d_embed, d, rng))
        self.target_norm = self.child("target_norm", LayerNorm(d))
        self.layers = [self.child(f"layer{i}", _Layer(cfg, rng)) for i in range(cfg.layers)]
        self.out = self.child("out", Linear(d, GEN_VOCAB, rng, zero_init=True))

    def forward(self, tokens: np.ndarray, pep_valid: np.ndarray, target: np.ndarray, target_valid: np.ndarray):
        """tokens (B, n) starting with BOS -> log-probs (B, n, V) and per-layer cross weights (B, n, Lt)."""
        n = tokens.shape[-1]
        if n > self.config.max_peptide + 1:
            raise MalformedPrefixError(f"prefix of {n} tokens exceeds {self.config.max_peptide + 1}")
        positions = np.broadcast_to(np.arange(n), tokens.shape)
        x = T.add(T.embedding(self.tok, tokens), T.embedding(self.pos, positions))
        tgt = self.target_norm(self.target_proj(Tensor(target)))
        tgt = T.masked_fill(tgt, ~target_valid[..., None])
        weights = []
        for layer in self.layers:
            x, w = layer(x, pep_valid, tgt, target_valid)
            weights.append(w)
        logits = self.out(x)
        return T.log_softmax(logits, axis=-1, valid=np.broadcast_to(SCORABLE, logits.shape)), weights

    def to_checkpoint(self, extra: dict | None = None) -> Checkpoint:
        return Checkpoint("pepgen", GEN_STAGE, self.seed, {"model": self.config.to_dict()}, self.state_dict(),
                          dict(extra or {}))

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "PepGenModel":
        if ckpt.kind != "pepgen":
            raise CheckpointError(f"expected a generator checkpoint, got kind {ckpt.kind!r}")
        model = cls(GenConfig.from_dict(ckpt.config["model"]), ckpt.seed)
        own = model.state_dict()
        if set(own) != set(ckpt.params) or any(own[k].shape != ckpt.params[k].shape for k in own):
            raise CheckpointError("checkpoint does not match model: " + diff_names(own, ckpt.params))
        model.load_state_dict(ckpt.params)
        return model


# ---------------------------------------------------------------- batches

@dataclass
class GenBatch:
    inputs: np.ndarray  # (B, n) BOS + residues, PAD after
    targets: np.ndarray  # (B, n) residues + EOS, PAD after
    valid: np.ndarray  # (B, n)
    target: np.ndarray  # (B, Lt, d_embed)
    target_valid: np.ndarray


def _stack_targets(encs) -> tuple[np.ndarray, np.ndarray]:
    lt = max(e.matrix.shape[0] for e in encs)
    d = encs[0].matrix.shape[1]
    mat = np.zeros((len(encs), lt, d))
    valid = np.zeros((len(encs), lt), dtype=bool)
    for i, e in enumerate(encs):
        n = e.matrix.shape[0]
        mat[i, :n] = e.matrix
        valid[i, :n] = e.mask
    return mat, valid


def make_batch(pairs: list[PairExample], encoder: TargetEncoder, max_peptide: int = PEPTIDE_LEN) -> GenBatch:
    toks = []
    for p in pairs:
        if len(p.peptide) > max_peptide:
            raise ValueError(f"peptide {p.peptide.id!r} has {len(p.peptide)} residues; cap is {max_peptide}")
        toks.append(tokenize(p.peptide.residues))
    n = max(len(t) for t in toks) + 1
    inputs = np.full((len(pairs), n), PAD, dtype=np.int64)
    targets = np.full((len(pairs), n), PAD, dtype=np.int64)
    valid = np.zeros((len(pairs), n), dtype=bool)
    for i, t in enumerate(toks):
        inputs[i, 0] = BOS
        inputs[i, 1:len(t) + 1] = t
        targets[i, :len(t)] = t
        targets[i, len(t)] = EOS
        valid[i, :len(t) + 1] = True
    tmat, tvalid = _stack_targets([encoder(p.protein) for p in pairs])
    return GenBatch(inputs, targets, valid, tmat, tvalid)


def _nll(model: PepGenModel, batch: GenBatch) -> tuple[Tensor, Tensor]:
    """Per-token negative log-likelihood (B, n) and its token-mean."""
    logp, _ = model.forward(batch.inputs, batch.valid, batch.target, batch.target_valid)
    onehot = np.zeros(logp.shape)
    b, n = batch.targets.shape
    onehot[np.arange(b)[:, None], np.arange(n)[None, :], batch.targets] = 1.0
    onehot *= batch.valid[..., None]
    picked = T.sum(T.mul(logp, Tensor(onehot)), axis=-1)  # (B, n)
    mean = T.mul(T.sum(picked), -1.0 / batch.valid.sum())
    return picked, mean


# ---------------------------------------------------------------- training

@dataclass
class GenTrainResult:
    model: PepGenModel
    log: list[dict]

    @property
    def checkpoint(self) -> Checkpoint:
        return self.model.to_checkpoint({"log": self.log})


def _corpus_log_ppl(model, pairs, encoder, batch_size=64) -> float:
    total = count = 0.0
    with T.no_grad():
        for i in range(0, len(pairs), batch_size):
            batch = make_batch(pairs[i:i + batch_size], encoder, model.config.max_peptide)
            picked, _ = _nll(model, batch)
            total -= float(picked.values.sum())
            count += float(batch.valid.sum())
    return total / count


def train_teacher_forcing(pairs: list[PairExample], source, config: GenConfig, seed: int = 0,
                          validation: list[PairExample] | None = None, epochs: int | None = None,
                          callback=None) -> GenTrainResult:
    """Next-token cross-entropy on ground-truth prefixes, EOS appended."""
    model = PepGenModel(config, seed)
    encoder = TargetEncoder(source, config.max_target)
    for p in list(pairs) + list(validation or []):
        encoder(p.protein)
    opt = Adam(model.named_parameters(), lr=config.lr, weight_decay=config.weight_decay)
    shuffle = np.random.default_rng([seed, 1])
    history = []
    for epoch in range(epochs if epochs is not None else config.epochs):
        total = count = 0.0
        order = shuffle.permutation(len(pairs))
        for b, start in enumerate(range(0, len(pairs), config.batch_size)):
            batch = make_batch([pairs[i] for i in order[start:start + config.batch_size]], encoder,
                               config.max_peptide)
            opt.zero_grad()
            _, loss = _nll(model, batch)
            if not np.isfinite(loss.item()):
                raise TrainingDiverged(epoch, b)
            T.backward(loss)
            opt.step()
            tokens = float(batch.valid.sum())
            total += loss.item() * tokens
            count += tokens
        entry = {"epoch": epoch, "train_log_ppl": total / count}
        if validation:
            entry["val_log_ppl"] = _corpus_log_ppl(model, validation, encoder)
        history.append(entry)
        if callback is not None and callback(model, entry) is False:
            break
    return GenTrainResult(model, history)


def log_perplexity(model: PepGenModel, pairs: list[PairExample], source) -> np.ndarray:
    """Mean per-token NLL (EOS included) of each peptide given its target."""
    encoder = source if isinstance(source, TargetEncoder) else TargetEncoder(source, model.config.max_target)
    out = []
    with T.no_grad():
        for i in range(0, len(pairs), 64):
            batch = make_batch(pairs[i:i + 64], encoder, model.config.max_peptide)
            picked, _ = _nll(model, batch)
            out.append(-picked.values.sum(axis=1) / batch.valid.sum(axis=1))
    return np.concatenate(out) if out else np.zeros(0)


# ---------------------------------------------------------------- decoding

@dataclass
class StepOutput:
    probs: np.ndarray  # (V,) next-token distribution
    cross_attention: np.ndarray  # (layers, Lt) head-averaged rows for the last position


def _check_prefix(prefix: np.ndarray, max_peptide: int) -> np.ndarray:
    prefix = np.asarray(prefix, dtype=np.int64)
    if prefix.ndim != 1 or prefix.size == 0 or prefix[0] != BOS:
        raise MalformedPrefixError("prefix must be a 1-D token array starting with BOS")
    if prefix.size > max_peptide + 1:
        raise MalformedPrefixError(f"prefix of {prefix.size} tokens exceeds {max_peptide + 1}")
    body = prefix[1:]
    if body.size and (body.min() < 1 or body.max() > X_TOKEN):
        raise MalformedPrefixError("prefix body may hold residue tokens only")
    return prefix


def decode_step(model: PepGenModel, prefix, target) -> StepOutput:
    """Next-token distribution after ``prefix`` (BOS first) given a target encoding."""
    prefix = _check_prefix(prefix, model.config.max_peptide)
    tmat, tvalid = _stack_targets([target])
    with T.no_grad():
        logp, weights = model.forward(prefix[None, :], np.ones((1, prefix.size), dtype=bool), tmat, tvalid)
    probs = np.exp(logp.values[0, -1])
    probs[~SCORABLE] = 0.0
    return StepOutput(probs, np.stack([w[0, -1] for w in weights]))


@dataclass(frozen=True)
class GenerationRequest:
    target: SequenceRecord
    length: int | None = None  # None -> unconstrained
    count: int = 1
    seed: int = 0
    greedy: bool = False
    temperature: float = 1.0
    top_k: int | None = 10
    trace: bool = False

    def __post_init__(self):
        if self.length is not None and not 1 <= self.length <= PEPTIDE_LEN:
            raise ValueError(f"length must be in [1, {PEPTIDE_LEN}], got {self.length}")
        if self.count < 1:
            raise ValueError("count must be at least 1")
        if not self.greedy and self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.top_k is not None and self.top_k < 1:
            raise ValueError("top_k must be at least 1")

    @property
    def mode(self) -> str:
        return "unconstrained" if self.length is None else f"length={self.length}"


@dataclass
class Candidate:
    target_id: str
    sequence: str
    mode: str
    seed: int
    index: int
    trace: np.ndarray | None = None  # (steps, layers, Lt)

    @property
    def id(self) -> str:
        return f"{self.target_id}_gen{self.index}"

    def header(self) -> str:
        return (f"{self.id} target_id={self.target_id} mode={self.mode} seed={self.seed} "
                f"candidate_index={self.index}")


def _pick(logits: np.ndarray, req: GenerationRequest, rng: np.random.Generator) -> int:
    if req.greedy:
        return int(np.argmax(logits))
    allowed = np.isfinite(logits)
    z = np.where(allowed, logits / req.temperature, -np.inf)
    if req.top_k is not None and req.top_k < allowed.sum():
        kth = np.sort(z[allowed])[-req.top_k]
        z = np.where(z >= kth, z, -np.inf)
    p = np.exp(z - z.max())
    p /= p.sum()
    return int(rng.choice(len(p), p=p))


def generate(model: PepGenModel, request: GenerationRequest, source, encoder: TargetEncoder | None = None,
             batch_size: int = 256) -> list[Candidate]:
    """Sample ``request.count`` peptides; candidate i draws from ``default_rng([seed, i])``."""
    enc = encoder or TargetEncoder(source, model.config.max_target)
    target = enc(request.target)
    cap = model.config.max_peptide
    out = []
    for start in range(0, request.count, batch_size):
        idx = list(range(start, min(request.count, start + batch_size)))
        out.extend(_generate_block(model, request, target, idx, cap))
    return out


def _generate_block(model, req: GenerationRequest, target, idx: list[int], cap: int) -> list[Candidate]:
    rngs = [np.random.default_rng([req.seed, i]) for i in idx]
    n = len(idx)
    tmat, tvalid = _stack_targets([target])
    tmat = np.repeat(tmat, n, axis=0)
    tvalid = np.repeat(tvalid, n, axis=0)
    seqs = np.full((n, 1), BOS, dtype=np.int64)
    done = np.zeros(n, dtype=bool)
    traces = [[] for _ in range(n)]
    stop_at = req.length if req.length is not None else cap
    for step in range(stop_at):
        live = np.flatnonzero(~done)
        if live.size == 0:
            break
        with T.no_grad():
            logp, weights = model.forward(seqs[live], np.ones(seqs[live].shape, dtype=bool), tmat[live], tvalid[live])
        last = logp.values[:, -1, :].copy()
        last[:, [PAD, BOS, X_TOKEN]] = -np.inf
        if req.length is not None or step == 0:
            last[:, EOS] = -np.inf
        new_col = np.full((n, 1), PAD, dtype=np.int64)
        for j, row in enumerate(live):
            tok = _pick(last[j], req, rngs[row])
            if tok == EOS:
                done[row] = True
            else:
                new_col[row, 0] = tok
                if req.trace:
                    traces[row].append(np.stack([w[j, -1] for w in weights]))
        # finished rows keep PAD and are never fed again
        seqs = np.concatenate([seqs, new_col], axis=1)
    result = []
    for row, i in enumerate(idx):
        body = seqs[row, 1:]
        body = body[body != PAD]
        trace = np.stack(traces[row]) if req.trace and traces[row] else None
        result.append(Candidate(req.target.id, detokenize(body), req.mode, req.seed, i, trace))
    return result


def write_candidates(cands: list[Candidate], path) -> None:
    recs = [SequenceRecord(c.id, c.sequence, "peptide") for c in cands]
    Path(path).write_text(format_fasta(recs, headers=[c.header() for c in cands]), encoding="utf-8")


def export_attention(candidates: list[Candidate], path, layer: int = -1):
    """Write each candidate's step x target-position cross-attention for one layer."""
    mats = {}
    for c in candidates:
        if c.trace is None:
            raise ValueError(f"candidate {c.id!r} was generated without an attention trace")
        n_layers = c.trace.shape[1]
        if not -n_layers <= layer < n_layers:
            raise IndexError(f"layer {layer} out of range for a {n_layers}-layer decoder")
        mats[c.id] = c.trace[:, layer, :]
    return write_container(path, mats, {"layer": layer, "rows": "decoding step", "cols": "target position"})

