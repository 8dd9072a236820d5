"""Partner-aware peptide-protein interaction predictor with binding-site heads.

Per side: a projected and layer-normed embedding feeds a convolutional
(local) path and a self-attention (global) path; a sigmoid gate mixes them.
Two chained cross-attention stages let each side condition on the other.
Masked mean pooling gives the pair vector ``[pep, prot, pep*prot]`` used by
the classifier and by a contrastive projection head. Per-residue heads sit on
the post-cross-attention features.

Every component always owns its parameters; :class:`AblationFlags` only
switches the forward path, so the parameter namespace is identical across
ablation variants.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import tensor as T
from .corpus import PairExample
from .nn import Adam, Conv1d, LayerNorm, Linear, Module, MultiHeadAttention, binary_cross_entropy_with_logits
from .storage import Checkpoint, CheckpointError, diff_names, write_container
from .tensor import Tensor

log = logging.getLogger(__name__)

PAIR_STAGE = "pair-level"
RESIDUE_STAGE = "residue-level"
FEATURE_STAGES = ("embedding", "extraction", "fusion", "cross_attention", "projection", "classifier_input")


class StageError(ValueError):
    pass


class TrainingDiverged(FloatingPointError):
    def __init__(self, epoch: int, batch: int):
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch


@dataclass(frozen=True)
class AblationFlags:
    cross_attention: bool = True
    self_attention: bool = True
    dual_branch: bool = True
    dilated_protein_cnn: bool = True
    gated_fusion: bool = True
    contrastive: bool = True

    @classmethod
    def preset(cls, name: str) -> "AblationFlags":
        try:
            return ABLATION_SERIES[name]
        except KeyError:
            raise ValueError(f"unknown ablation preset {name!r}; choose from {list(ABLATION_SERIES)}") from None


ABLATION_SERIES = {
    "model0": AblationFlags(False, False, False, False, False, False),
    "model1": AblationFlags(True, False, False, False, False, False),
    "model2": AblationFlags(True, True, False, False, False, False),
    "model3": AblationFlags(True, True, True, False, False, False),
    "model4": AblationFlags(True, True, True, True, False, False),
    "model5": AblationFlags(True, True, True, True, True, False),
    "full": AblationFlags(True, True, True, True, True, True),
}


@dataclass
class PepPIConfig:
    d_embed: int = 64
    d_model: int = 32
    heads: int = 2
    pep_kernel: int = 3
    prot_kernel: int = 3
    pep_conv_layers: int = 1
    dilations: tuple = (1, 2, 4)
    proj_dim: int = 16
    dropout: float = 0.0
    pep_len: int = 50
    prot_len: int = 800
    serial_order: str = "protein_first"
    ungated_fusion: str = "global"
    # training
    lr: float = 1e-3
    batch_size: int = 32
    epochs: int = 50
    contrastive_weight: float = 0.1
    temperature: float = 0.1
    weight_decay: float = 0.0
    residue_threshold: float = 0.5

    def __post_init__(self):
        self.dilations = tuple(int(d) for d in self.dilations)
        if self.d_model % self.heads:
            raise ValueError(f"heads={self.heads} must divide d_model={self.d_model}")
        if not self.dilations:
            raise ValueError("protein dilation schedule must be nonempty")
        if self.serial_order not in ("protein_first", "peptide_first"):
            raise ValueError(f"serial_order must be protein_first or peptide_first, got {self.serial_order!r}")
        if self.ungated_fusion not in ("global", "mean"):
            raise ValueError(f"ungated_fusion must be global or mean, got {self.ungated_fusion!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dilations"] = list(self.dilations)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PepPIConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown predictor config keys: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------- batches

@dataclass
class PairBatch:
    pep: np.ndarray  # (B, Lp, d_embed)
    pep_mask: np.ndarray
    prot: np.ndarray  # (B, Lq, d_embed)
    prot_mask: np.ndarray
    labels: np.ndarray
    pep_site: np.ndarray | None = None
    prot_site: np.ndarray | None = None
    keys: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.labels)


class Featurizer:
    """Builds padded embedding batches, caching per-sequence embeddings."""

    def __init__(self, source, pep_len: int, prot_len: int):
        self.source = source
        self.pep_len = pep_len
        self.prot_len = prot_len
        self._cache: dict = {}

    def _embed(self, record, length):
        key = (record.id, record.residues, length)
        hit = self._cache.get(key)
        if hit is None:
            hit = self.source.embed_record(record, length)
            self._cache[key] = hit
        return hit

    def batch(self, pairs: list[PairExample]) -> PairBatch:
        pe = [self._embed(p.peptide, self.pep_len) for p in pairs]
        qe = [self._embed(p.protein, self.prot_len) for p in pairs]
        sites = all(p.has_sites for p in pairs)
        ps = qs = None
        if sites:
            ps = np.zeros((len(pairs), self.pep_len))
            qs = np.zeros((len(pairs), self.prot_len))
            for i, p in enumerate(pairs):
                a = p.peptide_site[:self.pep_len]
                b = p.protein_site[:self.prot_len]
                ps[i, :len(a)] = a
                qs[i, :len(b)] = b
        return PairBatch(
            np.stack([e.matrix for e in pe]), np.stack([e.mask for e in pe]),
            np.stack([e.matrix for e in qe]), np.stack([e.mask for e in qe]),
            np.array([p.label for p in pairs], dtype=np.float64), ps, qs, [p.key for p in pairs],
        )


# ---------------------------------------------------------------- model

class _Side(Module):
    def __init__(self, cfg: PepPIConfig, rng, n_conv: int, kernel: int):
        super().__init__()
        d = cfg.d_model
        self.input = self.child("input", Linear(cfg.d_embed, d, rng))
        self.input_norm = self.child("input_norm", LayerNorm(d))
        self.convs = [self.child(f"conv{i}", Conv1d(d, d, kernel, rng)) for i in range(n_conv)]
        self.self_attn = self.child("self_attn", MultiHeadAttention(d, cfg.heads, rng))
        self.self_norm = self.child("self_norm", LayerNorm(d))
        self.gate = self.child("gate", Linear(2 * d, d, rng))


@dataclass
class ForwardOutput:
    logit: Tensor  # (B,)
    projection: Tensor  # (B, proj_dim), unit rows
    pep_feats: Tensor  # (B, Lp, d) after cross-attention
    prot_feats: Tensor
    pep_site_logit: Tensor  # (B, Lp)
    prot_site_logit: Tensor
    gates: dict  # side -> (B, L, d) gate values
    stages: dict  # stage name -> per-side / pooled arrays
    cross_weights: dict  # "protein_queries"/"peptide_queries" -> (B, Lq, Lk)

    @property
    def prob(self) -> np.ndarray:
        return T.sigmoid(self.logit).values


class PepPIModel(Module):
    def __init__(self, config: PepPIConfig, flags: AblationFlags = AblationFlags(), seed: int = 0):
        super().__init__()
        self.config = config
        self.flags = flags
        self.seed = seed
        self.stage = PAIR_STAGE
        cfg = config
        d = cfg.d_model
        rng = np.random.default_rng([seed, 0x9E])
        self.pep = self.child("pep", _Side(cfg, rng, cfg.pep_conv_layers, cfg.pep_kernel))
        self.prot = self.child("prot", _Side(cfg, rng, len(cfg.dilations), cfg.prot_kernel))
        cross = self.child("cross", Module())
        self.prot_from_pep = cross.child("prot_from_pep", MultiHeadAttention(d, cfg.heads, rng))
        self.prot_norm = cross.child("prot_norm", LayerNorm(d))
        self.pep_from_prot = cross.child("pep_from_prot", MultiHeadAttention(d, cfg.heads, rng))
        self.pep_norm = cross.child("pep_norm", LayerNorm(d))
        cls = self.child("classifier", Module())
        self.cls_hidden = cls.child("hidden", Linear(3 * d, d, rng))
        self.cls_out = cls.child("out", Linear(d, 1, rng, zero_init=True))
        con = self.child("contrast", Module())
        self.con_hidden = con.child("hidden", Linear(3 * d, d, rng))
        self.con_out = con.child("out", Linear(d, cfg.proj_dim, rng))
        site = self.child("site", Module())
        self.site_pep = site.child("pep", Linear(d, 1, rng, zero_init=True))
        self.site_prot = site.child("prot", Linear(d, 1, rng, zero_init=True))

    # -- parameter groups
    def head_names(self) -> set[str]:
        return {n for n in self.named_parameters() if n.startswith("site.")}

    def backbone_names(self) -> set[str]:
        return {n for n in self.named_parameters() if n.split(".")[0] in ("pep", "prot", "cross")}

    def reset_site_heads(self) -> None:
        for name, p in self.named_parameters().items():
            if name.startswith("site."):
                p.values[...] = 0.0

    # -- forward pieces
    def _side(self, side: _Side, emb: np.ndarray, mask: np.ndarray, is_protein: bool, rng, occlude=None):
        cfg, fl = self.config, self.flags
        pad = ~mask[..., None]
        h0 = T.masked_fill(side.input_norm(side.input(Tensor(emb))), pad)
        if fl.self_attention:
            att, _ = side.self_attn(h0, h0, key_valid=mask)
            glob = T.masked_fill(side.self_norm(T.add(h0, T.dropout(att, cfg.dropout, rng))), pad)
        else:
            glob = h0
        if fl.dual_branch:
            local = h0
            for i, conv in enumerate(side.convs):
                dil = cfg.dilations[i] if (is_protein and fl.dilated_protein_cnn) else 1
                local = T.masked_fill(T.add(local, T.relu(conv(local, dil))), pad)
        else:
            local = glob
        if occlude is not None:
            keep_local, keep_global = occlude
            if keep_local is not None:
                local = T.mul(local, Tensor(keep_local))
            if keep_global is not None:
                glob = T.mul(glob, Tensor(keep_global))
        if fl.gated_fusion:
            g = T.sigmoid(side.gate(T.concat([local, glob], axis=-1)))
            fused = T.add(T.mul(g, local), T.mul(T.sub(1.0, g), glob))
            fused = T.masked_fill(fused, pad)
            gate_vals = g.values
        else:
            fused = glob if cfg.ungated_fusion == "global" else T.mul(T.add(local, glob), 0.5)
            gate_vals = None
        return local, glob, fused, gate_vals

    def cross_attend(self, pep: Tensor, prot: Tensor, pep_mask: np.ndarray, prot_mask: np.ndarray):
        """Serial bidirectional cross-attention with residual + layer norm."""
        weights = {}
        if not self.flags.cross_attention:
            return pep, prot, weights
        if not pep_mask.any(axis=-1).all() or not prot_mask.any(axis=-1).all():
            raise T.MaskError("cross-attention partner is fully masked")

        def update_prot(pep_ctx):
            att, w = self.prot_from_pep(prot, pep_ctx, key_valid=pep_mask)
            weights["protein_queries"] = w
            return T.masked_fill(self.prot_norm(T.add(prot, att)), ~prot_mask[..., None])

        def update_pep(prot_ctx):
            att, w = self.pep_from_prot(pep, prot_ctx, key_valid=prot_mask)
            weights["peptide_queries"] = w
            return T.masked_fill(self.pep_norm(T.add(pep, att)), ~pep_mask[..., None])

        if self.config.serial_order == "protein_first":
            prot2 = update_prot(pep)
            pep2 = update_pep(prot2)
        else:
            pep2 = update_pep(prot)
            prot2 = update_prot(pep2)
        return pep2, prot2, weights

    def forward(self, batch: PairBatch, rng: np.random.Generator | None = None, occlude: dict | None = None) -> ForwardOutput:
        occlude = occlude or {}
        pl, pg, pf, pgate = self._side(self.pep, batch.pep, batch.pep_mask, False, rng, occlude.get("pep"))
        ql, qg, qf, qgate = self._side(self.prot, batch.prot, batch.prot_mask, True, rng, occlude.get("prot"))
        pep2, prot2, cw = self.cross_attend(pf, qf, batch.pep_mask, batch.prot_mask)
        pp = T.mean_pool(pep2, batch.pep_mask)
        qp = T.mean_pool(prot2, batch.prot_mask)
        cls_in = T.concat([pp, qp, T.mul(pp, qp)], axis=-1)
        hidden = T.dropout(T.tanh(self.cls_hidden(cls_in)), self.config.dropout, rng)
        logit = T.reshape(self.cls_out(hidden), (len(batch),))
        proj = T.l2_normalize(self.con_out(T.tanh(self.con_hidden(cls_in))))
        pep_site = T.reshape(self.site_pep(pep2), batch.pep_mask.shape)
        prot_site = T.reshape(self.site_prot(prot2), batch.prot_mask.shape)
        stages = {
            "embedding": (batch.pep, batch.prot),
            "extraction": (np.concatenate([pl.values, pg.values], -1), np.concatenate([ql.values, qg.values], -1)),
            "fusion": (pf.values, qf.values),
            "cross_attention": (pep2.values, prot2.values),
            "projection": proj.values,
            "classifier_input": cls_in.values,
        }
        return ForwardOutput(logit, proj, pep2, prot2, pep_site, prot_site,
                             {"pep": pgate, "prot": qgate}, stages, cw)

    # -- checkpoints
    def to_checkpoint(self, extra: dict | None = None) -> Checkpoint:
        cfg = {"model": self.config.to_dict(), "flags": asdict(self.flags)}
        return Checkpoint("peppi", self.stage, self.seed, cfg, self.state_dict(), dict(extra or {}))

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "PepPIModel":
        if ckpt.kind != "peppi":
            raise CheckpointError(f"expected a predictor checkpoint, got kind {ckpt.kind!r}")
        if ckpt.stage not in (PAIR_STAGE, RESIDUE_STAGE):
            raise CheckpointError(f"unknown predictor stage {ckpt.stage!r}")
        model = cls(PepPIConfig.from_dict(ckpt.config["model"]), AblationFlags(**ckpt.config["flags"]), ckpt.seed)
        own = model.state_dict()
        if set(own) != set(ckpt.params) or any(own[k].shape != ckpt.params[k].shape for k in own):
            raise CheckpointError("checkpoint does not match model: " + diff_names(own, ckpt.params))
        model.load_state_dict(ckpt.params)
        model.stage = ckpt.stage
        return model


def build_ablation(flags: AblationFlags, config: PepPIConfig, seed: int = 0) -> PepPIModel:
    return PepPIModel(config, flags, seed)


# ---------------------------------------------------------------- losses

def gated_fuse(local: Tensor, glob: Tensor, gate: Linear, mask: np.ndarray):
    """``g = sigmoid(W[local, global] + b)``; returns ``(g*local + (1-g)*global, g)``."""
    if local.shape != glob.shape:
        raise T.ShapeError(f"gated_fuse: local {local.shape} vs global {glob.shape}")
    g = T.sigmoid(gate(T.concat([local, glob], axis=-1)))
    fused = T.add(T.mul(g, local), T.mul(T.sub(1.0, g), glob))
    return T.masked_fill(fused, ~np.asarray(mask, dtype=bool)[..., None]), g.values


def supcon_loss(z: Tensor, labels, temperature: float = 0.1) -> Tensor:
    """Supervised contrastive loss over unit-norm rows of ``z``.

    For each anchor with at least one same-label partner, the mean over its
    positives of ``-log softmax_{a != i}(z_i . z_a / t)[p]``; averaged over
    those anchors. Returns 0 (and logs) when no anchor has a positive.
    """
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    labels = np.asarray(labels)
    n = len(labels)
    if n < 2:
        raise ValueError("supcon_loss needs at least two examples")
    norms = np.linalg.norm(z.values, axis=-1)
    # eps-stabilised normalisation can leave degenerate rows shorter than 1
    if np.any(norms > 1.0 + 1e-6):
        raise ValueError("supcon_loss expects L2-normalised projections (row norm above 1)")
    off_diag = ~np.eye(n, dtype=bool)
    positives = (labels[:, None] == labels[None, :]) & off_diag
    n_pos = positives.sum(axis=1)
    anchors = n_pos > 0
    if not anchors.any():
        log.warning("supcon_loss: no anchor has a same-label partner; contributing 0")
        return Tensor(0.0)
    sim = T.mul(T.matmul(z, T.swap_last(z)), 1.0 / temperature)
    logp = T.log_softmax(sim, axis=-1, valid=off_diag)
    weights = np.where(anchors[:, None], positives / np.maximum(n_pos, 1)[:, None], 0.0) / anchors.sum()
    return T.mul(T.sum(T.mul(logp, Tensor(weights))), -1.0)


def pair_loss(model: PepPIModel, out: ForwardOutput, labels: np.ndarray) -> Tensor:
    loss = binary_cross_entropy_with_logits(out.logit, labels)
    lam = model.config.contrastive_weight
    if model.flags.contrastive and lam > 0:
        loss = T.add(loss, T.mul(supcon_loss(out.projection, labels, model.config.temperature), lam))
    return loss


def residue_loss(out: ForwardOutput, batch: PairBatch) -> Tensor:
    """Per-side mean BCE over real positions, summed over the two sides."""
    if batch.pep_site is None or batch.prot_site is None:
        raise ValueError("residue training needs site annotations for every example")
    total = None
    for logits, target, mask in ((out.pep_site_logit, batch.pep_site, batch.pep_mask),
                                 (out.prot_site_logit, batch.prot_site, batch.prot_mask)):
        term = binary_cross_entropy_with_logits(logits, target, weights=mask.astype(np.float64))
        total = term if total is None else T.add(total, term)
    return total


# ---------------------------------------------------------------- training

@dataclass
class TrainResult:
    model: PepPIModel
    log: list[dict]

    @property
    def checkpoint(self) -> Checkpoint:
        return self.model.to_checkpoint({"log": self.log})


def _batches(n: int, size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, size):
        yield order[start:start + size]


def train_pair_level(pairs: list[PairExample], source, config: PepPIConfig, flags: AblationFlags = AblationFlags(),
                     seed: int = 0, validation: list[PairExample] | None = None,
                     epochs: int | None = None, callback=None) -> TrainResult:
    """Mini-batch Adam on BCE (+ weighted supervised contrastive term)."""
    from .metrics import auroc

    model = PepPIModel(config, flags, seed)
    feat = Featurizer(source, config.pep_len, config.prot_len)
    params = model.named_parameters()
    opt = Adam(params, lr=config.lr, weight_decay=config.weight_decay)
    shuffle = np.random.default_rng([seed, 1])
    drop = np.random.default_rng([seed, 2]) if config.dropout > 0 else None
    history = []
    for epoch in range(epochs if epochs is not None else config.epochs):
        total = correct = 0.0
        for b, idx in enumerate(_batches(len(pairs), config.batch_size, shuffle)):
            batch = feat.batch([pairs[i] for i in idx])
            opt.zero_grad()
            out = model.forward(batch, drop)
            loss = pair_loss(model, out, batch.labels)
            if not np.isfinite(loss.item()):
                raise TrainingDiverged(epoch, b)
            T.backward(loss)
            opt.step()
            total += loss.item() * len(batch)
            correct += float(np.sum((out.logit.values > 0) == (batch.labels > 0.5)))
        entry = {"epoch": epoch, "loss": total / len(pairs), "train_acc": correct / len(pairs)}
        if validation:
            scores = predict_pair(model, validation, source, featurizer=None)
            entry["val_auroc"] = auroc(scores, [p.label for p in validation])
        history.append(entry)
        if callback is not None and callback(model, entry) is False:
            break
    return TrainResult(model, history)


def _train_residue(model: PepPIModel, examples: list[PairExample], source, config: PepPIConfig, seed: int,
                   epochs: int, freeze_backbone: bool, validation, callback) -> TrainResult:
    from .metrics import aupr

    bad = [p.key for p in examples if p.label != 1]
    if bad:
        raise ValueError(f"residue fine-tuning takes positives only; label-0 examples: {bad[:5]}")
    missing = [p.key for p in examples if not p.has_sites]
    if missing:
        raise ValueError(f"examples without site annotations: {missing[:5]}")
    model.stage = RESIDUE_STAGE
    feat = Featurizer(source, config.pep_len, config.prot_len)
    params = model.named_parameters()
    trainable = model.head_names() if freeze_backbone else set(params)
    opt = Adam(params, lr=config.lr, weight_decay=config.weight_decay)
    shuffle = np.random.default_rng([seed, 3])
    drop = np.random.default_rng([seed, 4]) if config.dropout > 0 else None
    history = []
    for epoch in range(epochs):
        total = 0.0
        for b, idx in enumerate(_batches(len(examples), config.batch_size, shuffle)):
            batch = feat.batch([examples[i] for i in idx])
            opt.zero_grad()
            out = model.forward(batch, drop)
            loss = residue_loss(out, batch)
            if not np.isfinite(loss.item()):
                raise TrainingDiverged(epoch, b)
            T.backward(loss)
            opt.step(trainable)
            total += loss.item() * len(batch)
        entry = {"epoch": epoch, "loss": total / len(examples)}
        if validation:
            res = predict_residues(model, validation, source)
            pep_scores = np.concatenate([r.peptide for r in res])
            pep_labels = np.concatenate([p.peptide_site[:config.pep_len] for p in validation])
            prot_scores = np.concatenate([r.protein for r in res])
            prot_labels = np.concatenate([p.protein_site[:config.prot_len] for p in validation])
            entry["val_pep_aupr"] = aupr(pep_scores, pep_labels)
            entry["val_prot_aupr"] = aupr(prot_scores, prot_labels)
        history.append(entry)
        if callback is not None and callback(model, entry) is False:
            break
    return TrainResult(model, history)


def transfer_finetune_residue(pair_checkpoint: Checkpoint, examples: list[PairExample], source,
                              config: PepPIConfig | None = None, seed: int = 0, epochs: int | None = None,
                              freeze_backbone: bool = False, validation=None, callback=None) -> TrainResult:
    """Initialise from a pair-level checkpoint, reset the site heads, fine-tune on sites."""
    if pair_checkpoint.stage != PAIR_STAGE:
        raise StageError(f"transfer needs a pair-level checkpoint, got {pair_checkpoint.stage!r}")
    model = PepPIModel.from_checkpoint(pair_checkpoint)
    if config is not None:
        model.config = replace(model.config, **{k: getattr(config, k) for k in
                                                ("lr", "batch_size", "epochs", "weight_decay", "dropout")})
    model.reset_site_heads()
    n = epochs if epochs is not None else model.config.epochs
    return _train_residue(model, examples, source, model.config, seed, n, freeze_backbone, validation, callback)


def train_residue_from_scratch(examples: list[PairExample], source, config: PepPIConfig,
                               flags: AblationFlags = AblationFlags(), seed: int = 0, epochs: int | None = None,
                               validation=None, callback=None) -> TrainResult:
    model = PepPIModel(config, flags, seed)
    n = epochs if epochs is not None else config.epochs
    return _train_residue(model, examples, source, config, seed, n, False, validation, callback)


# ---------------------------------------------------------------- inference

@dataclass
class PairPrediction:
    key: str
    probability: float
    pooled: np.ndarray
    gates: dict | None = None


@dataclass
class ResiduePrediction:
    key: str
    peptide: np.ndarray  # one probability per real peptide position
    protein: np.ndarray


def _chunks(items, size):
    for i in range(0, len(items), size):
        yield items[i:i + size]


@T.no_grad()
def predict_pair(model: PepPIModel, pairs: list[PairExample], source, featurizer: Featurizer | None = None,
                 batch_size: int = 64, detailed: bool = False):
    """Binding probabilities in input order (eval mode, no dropout)."""
    feat = featurizer or Featurizer(source, model.config.pep_len, model.config.prot_len)
    probs, details = [], []
    for chunk in _chunks(pairs, batch_size):
        out = model.forward(feat.batch(chunk))
        p = out.prob
        probs.append(p)
        if detailed:
            for i, pair in enumerate(chunk):
                gates = {k: (None if v is None else v[i]) for k, v in out.gates.items()}
                details.append(PairPrediction(pair.key, float(p[i]), out.stages["classifier_input"][i], gates))
    if detailed:
        return details
    return np.concatenate(probs) if probs else np.zeros(0)


@T.no_grad()
def predict_residues(model: PepPIModel, pairs: list[PairExample], source, batch_size: int = 64):
    if model.stage != RESIDUE_STAGE:
        raise StageError("residue prediction needs a residue-level checkpoint (site heads are untrained)")
    feat = Featurizer(source, model.config.pep_len, model.config.prot_len)
    out_list = []
    for chunk in _chunks(pairs, batch_size):
        batch = feat.batch(chunk)
        out = model.forward(batch)
        pp = T.sigmoid(out.pep_site_logit).values
        qp = T.sigmoid(out.prot_site_logit).values
        for i, pair in enumerate(chunk):
            out_list.append(ResiduePrediction(pair.key, pp[i][batch.pep_mask[i]], qp[i][batch.prot_mask[i]]))
    return out_list


@T.no_grad()
def export_features(model: PepPIModel, pairs: list[PairExample], source, path, stages=FEATURE_STAGES):
    """Write one matrix per (pair, stage); per-residue stages stack peptide rows over protein rows."""
    unknown = [s for s in stages if s not in FEATURE_STAGES]
    if unknown:
        raise ValueError(f"unknown feature stages {unknown}; choose from {list(FEATURE_STAGES)}")
    feat = Featurizer(source, model.config.pep_len, model.config.prot_len)
    mats = {}
    for chunk in _chunks(pairs, 64):
        batch = feat.batch(chunk)
        out = model.forward(batch)
        for i, pair in enumerate(chunk):
            pm, qm = batch.pep_mask[i], batch.prot_mask[i]
            for s in stages:
                val = out.stages[s]
                if isinstance(val, tuple):
                    mats[f"{pair.key}/{s}"] = np.concatenate([val[0][i][pm], val[1][i][qm]], axis=0)
                else:
                    mats[f"{pair.key}/{s}"] = val[i][None, :]
    meta = {"labels": {p.key: int(p.label) for p in pairs}, "stages": list(stages),
            "peptide_rows": {p.key: int(min(len(p.peptide), model.config.pep_len)) for p in pairs}}
    return write_container(path, mats, meta)
