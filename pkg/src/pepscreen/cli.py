"""``pepscreen`` command line.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numeric failure. Every command writes ``run_manifest.json`` into ``--out``.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import metrics, pepgen, peppi, screening, synthetic
from .corpus import (CorpusManifest, PairExample, admit_pairs, build_generation_corpus, kfold_split, read_pairs,
                     read_sites, sample_negatives, write_pairs, write_sites)
from .encoder import SyntheticEmbedder, import_embeddings
from .sequences import MAX_X_FRACTION, SequenceRecord, parse_fasta, write_fasta
from .storage import Checkpoint, CheckpointError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- configuration

def _defaults() -> dict:
    return {
        "encoder": {"d_embed": 64, "seed": 0, "embeddings": None},
        "data": {"folds": 5, "max_x_fraction": MAX_X_FRACTION, "cluster_threshold": 0.8,
                 "generation_train": None, "generation_test": None},
        "peppi": peppi.PepPIConfig().to_dict(),
        "flags": asdict(peppi.AblationFlags()),
        "pepgen": pepgen.GenConfig().to_dict(),
        "screening": {"top_k": screening.TOP_K, "threshold": 0.5, "low_homology_threshold": 0.6,
                      "random_peptides": 100},
    }


def load_config(path: str | None) -> tuple[dict, set]:
    """Defaults overlaid with the JSON file; returns (config, sections given explicitly)."""
    cfg = _defaults()
    if path is None:
        return cfg, set()
    try:
        user = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(user, dict):
        raise UsageError(f"config {path} must be a JSON object")
    for section, values in user.items():
        if section not in cfg:
            raise UsageError(f"unknown config section {section!r}; expected one of {sorted(cfg)}")
        if not isinstance(values, dict):
            raise UsageError(f"config section {section!r} must be an object")
        unknown = sorted(set(values) - set(cfg[section]))
        if unknown:
            raise UsageError(f"unknown keys in config section {section!r}: {unknown}")
        cfg[section].update(values)
    try:
        peppi.PepPIConfig.from_dict(cfg["peppi"])
        peppi.AblationFlags(**cfg["flags"])
        pepgen.GenConfig.from_dict(cfg["pepgen"])
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid config: {exc}") from exc
    return cfg, set(user)


def make_source(enc: dict):
    if enc.get("embeddings"):
        return import_embeddings(enc["embeddings"], d_embed=enc["d_embed"])
    return SyntheticEmbedder(enc["d_embed"], seed=enc["seed"])


def _encoder_extra(enc: dict, source) -> dict:
    return {"encoder": dict(enc), "encoder_id": source.encoder_id}


class Context:
    """Per-invocation state: parsed args, resolved config and tracked inputs."""

    def __init__(self, args):
        self.args = args
        self.config, self.explicit = load_config(args.config)
        self.out = Path(args.out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.inputs: list[str] = [args.config] if args.config else []
        self._source = None

    def use(self, *paths):
        self.inputs.extend(str(p) for p in paths if p is not None)

    @property
    def seed(self) -> int:
        return self.args.seed

    def source(self):
        if self._source is None:
            self._source = make_source(self.config["encoder"])
        return self._source

    def encoder_for(self, ckpt: Checkpoint) -> dict:
        """The checkpoint's own encoder unless the config names one explicitly."""
        if "encoder" in self.explicit:
            return self.config["encoder"]
        return ckpt.extra.get("encoder", self.config["encoder"])

    def source_for(self, ckpt: Checkpoint):
        src = make_source(self.encoder_for(ckpt))
        want = ckpt.extra.get("encoder_id")
        if want is not None and src.encoder_id != want:
            raise CheckpointError(f"checkpoint was trained with encoder {want!r}, configured encoder is "
                                  f"{src.encoder_id!r}")
        return src

    def checkpoint(self, path) -> Checkpoint:
        self.use(path)
        return Checkpoint.load(path)

    def peppi_config(self) -> peppi.PepPIConfig:
        cfg = dict(self.config["peppi"])
        cfg["d_embed"] = self.source().d_embed
        return peppi.PepPIConfig.from_dict(cfg)

    def flags(self) -> peppi.AblationFlags:
        if getattr(self.args, "preset", None):
            return peppi.AblationFlags.preset(self.args.preset)
        return peppi.AblationFlags(**self.config["flags"])

    def finish(self, clock: screening.Stopwatch) -> None:
        seeds = {"seed": self.seed, "encoder_seed": self.config["encoder"]["seed"]}
        screening.RunManifest.collect(self.args.command, self.config, seeds, self.inputs, self.out,
                                      clock.elapsed()).save(self.out)


# ---------------------------------------------------------------- corpus helpers

def _records(path, kind) -> dict[str, SequenceRecord]:
    return {r.id: r for r in parse_fasta(path, kind)}


def _corpus_paths(args) -> dict:
    base = Path(args.corpus) if getattr(args, "corpus", None) else None
    def pick(name, default):
        given = getattr(args, name, None)
        if given:
            return Path(given)
        if base is not None and (base / default).exists():
            return base / default
        return None
    paths = {"peptides": pick("peptides", "peptides.fasta"), "proteins": pick("proteins", "proteins.fasta"),
             "pairs": pick("pairs", "pairs.tsv"), "sites": pick("sites", "sites.json")}
    missing = [k for k in ("peptides", "proteins", "pairs") if paths[k] is None]
    if missing:
        raise UsageError(f"missing corpus inputs: {missing} (give --corpus DIR or the individual files)")
    return paths


def load_corpus(ctx: Context, pairs_path=None) -> list[PairExample]:
    paths = _corpus_paths(ctx.args)
    if pairs_path is not None:
        paths["pairs"] = Path(pairs_path)
    ctx.use(*paths.values())
    sites = read_sites(paths["sites"]) if paths["sites"] else None
    return read_pairs(paths["pairs"], _records(paths["peptides"], "peptide"), _records(paths["proteins"], "protein"),
                      sites)


def load_target(ctx: Context) -> SequenceRecord:
    args = ctx.args
    ctx.use(args.target)
    recs = parse_fasta(args.target, "protein")
    if args.target_id is None:
        if len(recs) != 1:
            raise UsageError(f"{args.target} holds {len(recs)} records; pick one with --target-id")
        return recs[0]
    for r in recs:
        if r.id == args.target_id:
            return r
    raise ValueError(f"target id {args.target_id!r} not found in {args.target}")


def _split_folds(pairs, manifest: CorpusManifest, fold: int):
    fold_of = manifest.fold_of()
    missing = [p.key for p in pairs if p.key not in fold_of]
    if missing:
        raise ValueError(f"{len(missing)} pairs are not in the fold manifest, e.g. {missing[0]!r}")
    if not 0 <= fold < manifest.k:
        raise UsageError(f"--fold must be in [0, {manifest.k}), got {fold}")
    return [p for p in pairs if fold_of[p.key] != fold], [p for p in pairs if fold_of[p.key] == fold]


# ---------------------------------------------------------------- commands

def cmd_prepare(ctx: Context) -> None:
    data = ctx.config["data"]
    positives = load_corpus(ctx)
    if any(p.label != 1 for p in positives):
        raise ValueError("prepare expects positive pairs only; negatives are sampled")
    admitted = admit_pairs(positives, data["max_x_fraction"])
    negatives = sample_negatives(admitted, ctx.seed)
    corpus = admitted + negatives
    manifest = kfold_split(corpus, data["folds"], ctx.seed, {"max_x_fraction": data["max_x_fraction"]})
    peps = {p.peptide.id: p.peptide for p in corpus}
    prots = {p.protein.id: p.protein for p in corpus}
    write_fasta(peps.values(), ctx.out / "peptides.fasta")
    write_fasta(prots.values(), ctx.out / "proteins.fasta")
    write_pairs(corpus, ctx.out / "pairs.tsv")
    if any(p.has_sites for p in corpus):
        write_sites(corpus, ctx.out / "sites.json")
    manifest.save(ctx.out / "folds.json")
    report = {"positives_in": len(positives), "admitted": len(admitted), "negatives": len(negatives),
              "folds": manifest.counts}
    if data["generation_train"] is not None:
        split = build_generation_corpus(admitted, data["generation_train"], data["generation_test"] or 0, ctx.seed,
                                        cluster_threshold=data["cluster_threshold"])
        write_pairs(split.train, ctx.out / "generation_train.tsv")
        write_pairs(split.test, ctx.out / "generation_test.tsv")
        screening.write_json(split.manifest, ctx.out / "generation_manifest.json")
        report["generation"] = split.manifest["counts"]
    screening.write_json(report, ctx.out / "prepare_report.json")


def cmd_make_synthetic(ctx: Context) -> None:
    a = ctx.args
    sites = False
    if a.kind == "motif":
        bench = synthetic.cross_motif_benchmark(ctx.seed, a.n_train, a.n_test, pep_len=a.pep_len,
                                                prot_len=a.prot_len, n_decoys=a.decoys)
        train, test = bench.train, bench.test
    elif a.kind == "interface":
        motifs = synthetic.make_motifs(np.random.default_rng([ctx.seed, 0xC0]), 4, 3)
        bench = synthetic.interface_benchmark(ctx.seed, motifs, a.n_train, a.n_test, a.pep_len, a.prot_len)
        train, test, sites = bench.train, bench.test, True
    else:
        fc = synthetic.family_corpus(ctx.seed)
        train, test = fc.train, fc.test
        screening.write_json(fc.family, ctx.out / "families.json")
    everything = train + test
    write_fasta({p.peptide.id: p.peptide for p in everything}.values(), ctx.out / "peptides.fasta")
    write_fasta({p.protein.id: p.protein for p in everything}.values(), ctx.out / "proteins.fasta")
    write_pairs(train, ctx.out / "pairs.tsv")
    write_pairs(test, ctx.out / "test_pairs.tsv")
    if sites:
        write_sites(everything, ctx.out / "sites.json")


def cmd_train_predict(ctx: Context) -> None:
    a = ctx.args
    pairs = load_corpus(ctx)
    validation = None
    if a.folds is not None:
        ctx.use(a.folds)
        pairs, validation = _split_folds(pairs, CorpusManifest.load(a.folds), a.fold)
    elif a.validation is not None:
        validation = load_corpus(ctx, a.validation)
    if a.stage == "pair":
        if a.init is not None:
            raise UsageError("--init applies to residue-level training")
        cfg = ctx.peppi_config()
        source, encoder = ctx.source(), ctx.config["encoder"]
        result = peppi.train_pair_level(pairs, source, cfg, ctx.flags(), ctx.seed, validation)
    elif a.init is not None:
        init = ctx.checkpoint(a.init)
        source, encoder = ctx.source_for(init), ctx.encoder_for(init)
        overrides = peppi.PepPIConfig.from_dict({**init.config["model"], **{
            k: ctx.config["peppi"][k] for k in ("lr", "batch_size", "epochs", "weight_decay", "dropout")}})
        result = peppi.transfer_finetune_residue(init, pairs, source, overrides, ctx.seed,
                                                 freeze_backbone=a.freeze_backbone, validation=validation)
    else:
        source, encoder = ctx.source(), ctx.config["encoder"]
        result = peppi.train_residue_from_scratch(pairs, source, ctx.peppi_config(), ctx.flags(), ctx.seed,
                                                  validation=validation)
    result.model.to_checkpoint(_encoder_extra(encoder, source)).save(ctx.out / "checkpoint")
    screening.write_json(result.log, ctx.out / "train_log.json")


def cmd_train_generate(ctx: Context) -> None:
    a = ctx.args
    pairs = [p for p in load_corpus(ctx) if p.label == 1]
    validation = None
    if a.validation is not None:
        validation = [p for p in load_corpus(ctx, a.validation) if p.label == 1]
    cfg = pepgen.GenConfig.from_dict({**ctx.config["pepgen"], "d_embed": ctx.source().d_embed})
    result = pepgen.train_teacher_forcing(pairs, ctx.source(), cfg, ctx.seed, validation)
    result.model.to_checkpoint(_encoder_extra(ctx.config["encoder"], ctx.source())).save(ctx.out / "checkpoint")
    screening.write_json(result.log, ctx.out / "train_log.json")


def _load_predictor(ctx: Context, path):
    ckpt = ctx.checkpoint(path)
    return peppi.PepPIModel.from_checkpoint(ckpt), ctx.source_for(ckpt)


def _load_generator(ctx: Context, path):
    ckpt = ctx.checkpoint(path)
    return pepgen.PepGenModel.from_checkpoint(ckpt), ctx.source_for(ckpt)


def cmd_eval(ctx: Context) -> None:
    a = ctx.args
    pairs = load_corpus(ctx)
    models = [_load_predictor(ctx, c) for c in a.checkpoint]
    threshold = ctx.config["screening"]["threshold"]
    per_fold = []
    if a.folds is not None:
        ctx.use(a.folds)
        manifest = CorpusManifest.load(a.folds)
        if len(models) not in (1, manifest.k):
            raise UsageError(f"give one checkpoint or one per fold ({manifest.k}), got {len(models)}")
        for f in range(manifest.k):
            model, source = models[f if len(models) > 1 else 0]
            per_fold.append(screening.evaluate(model, _split_folds(pairs, manifest, f)[1], source, a.task,
                                               threshold))
    else:
        for model, source in models:
            per_fold.append(screening.evaluate(model, pairs, source, a.task, threshold))
    screening.write_json({"task": a.task, "folds": per_fold, **screening.summarize_folds(per_fold)},
                         ctx.out / "metrics.json")


def _request(ctx: Context, target: SequenceRecord) -> pepgen.GenerationRequest:
    a = ctx.args
    return pepgen.GenerationRequest(target, length=a.length, count=a.count, seed=ctx.seed, greedy=a.greedy,
                                    temperature=a.temperature, top_k=a.sample_top_k, trace=getattr(a, "trace", False))


def cmd_generate(ctx: Context) -> None:
    model, source = _load_generator(ctx, ctx.args.checkpoint)
    target = load_target(ctx)
    cands = pepgen.generate(model, _request(ctx, target), source)
    pepgen.write_candidates(cands, ctx.out / "candidates.fasta")
    if ctx.args.trace:
        pepgen.export_attention(cands, ctx.out / "attention.json")


def _generate_and_rank(ctx: Context, predictor, p_source, generator_path, target) -> screening.RankReport:
    gen, g_source = _load_generator(ctx, generator_path)
    cands = pepgen.generate(gen, _request(ctx, target), g_source)
    pepgen.write_candidates(cands, ctx.out / "candidates.fasta")
    records = [SequenceRecord(c.id, c.sequence, "peptide") for c in cands]
    meta = [{"target_id": c.target_id, "mode": c.mode, "seed": c.seed, "candidate_index": c.index} for c in cands]
    return screening.rank_records(records, target, screening.model_scorer(predictor, p_source, ctx.args.threads),
                                  meta, ctx.args.top_k or ctx.config["screening"]["top_k"])


def cmd_rank(ctx: Context) -> None:
    a = ctx.args
    if (a.candidates is None) == (a.generator is None):
        raise UsageError("give exactly one of --candidates or --generator")
    predictor, source = _load_predictor(ctx, a.predictor)
    target = load_target(ctx)
    if a.generator is not None:
        report = _generate_and_rank(ctx, predictor, source, a.generator, target)
    else:
        ctx.use(a.candidates)
        records = parse_fasta(a.candidates, "peptide")
        headers = screening.candidate_metadata(a.candidates)
        report = screening.rank_records(records, target, screening.model_scorer(predictor, source, a.threads),
                                        [headers.get(r.id, {}) for r in records],
                                        a.top_k or ctx.config["screening"]["top_k"])
    report.write(ctx.out)


def cmd_background_compare(ctx: Context) -> None:
    a = ctx.args
    predictor, source = _load_predictor(ctx, a.predictor)
    target = load_target(ctx)
    ctx.use(a.ranked, a.background)
    ranked = screening.read_ranked(a.ranked)
    background = parse_fasta(a.background, "peptide")
    screening.check_length_policy([r.sequence for r in ranked], [b.residues for b in background])
    bg = screening.score_peptides(predictor, background, target, source, a.threads)
    with open(ctx.out / "background_scores.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["peptide_id", "sequence", "probability"])
        for rec, p in zip(background, bg):
            w.writerow([rec.id, rec.residues, repr(float(p))])
    report = screening.background_compare([r.probability for r in ranked], bg)
    screening.write_json(report, ctx.out / "background_compare.json")


def cmd_ala_scan(ctx: Context) -> None:
    a = ctx.args
    predictor, source = _load_predictor(ctx, a.predictor)
    target = load_target(ctx)
    peptide = SequenceRecord.from_raw(a.peptide_id, a.peptide, "peptide")
    results = screening.ala_scan(peptide, target, screening.model_scorer(predictor, source, a.threads))
    screening.write_scan(results, ctx.out / "scan.csv")
    screening.write_scan(screening.rank_by_sensitivity(results), ctx.out / "scan_ranked.csv")
    screening.write_json({"peptide": peptide.residues, "target_id": target.id, "rows": len(results),
                          "flagged": [r.position for r in results if r.flagged]}, ctx.out / "scan.json")


def cmd_low_homology(ctx: Context) -> None:
    a, scr = ctx.args, ctx.config["screening"]
    corpus = load_corpus(ctx)
    target = load_target(ctx)
    ctx.use(a.known)
    known = parse_fasta(a.known, "peptide")
    threshold = scr["low_homology_threshold"] if a.threshold is None else a.threshold
    kept = screening.low_homology_filter(corpus, target, known, threshold)
    write_pairs(kept, ctx.out / "filtered_pairs.tsv")
    if a.predictor is not None:
        predictor, source = _load_predictor(ctx, a.predictor)
    else:
        source = ctx.source()
        result = peppi.train_pair_level(kept, source, ctx.peppi_config(), ctx.flags(), ctx.seed)
        predictor = result.model
        predictor.to_checkpoint(_encoder_extra(ctx.config["encoder"], source)).save(ctx.out / "checkpoint")
    scorer = screening.model_scorer(predictor, source, a.threads)
    known_scores = scorer(known, target)
    rand = screening.random_peptides([len(known[i % len(known)]) for i in range(scr["random_peptides"])], ctx.seed)
    report = {"threshold": threshold, "pairs_before": len(corpus), "pairs_after": len(kept),
              "known_binders": {k.id: float(p) for k, p in zip(known, known_scores)},
              "versus_random": screening.known_binder_report(known_scores, scorer(rand, target))}
    if a.generator is not None:
        ranked = _generate_and_rank(ctx, predictor, source, a.generator, target)
        ranked.write(ctx.out)
        best = ranked.ranked[0]
        write_fasta([SequenceRecord(best.candidate_id, best.sequence, "peptide")], ctx.out / "top_candidate.fasta")
        report["top_candidate"] = {"id": best.candidate_id, "sequence": best.sequence,
                                   "probability": best.probability}
    screening.write_json(report, ctx.out / "low_homology.json")


def cmd_ingest_scores(ctx: Context) -> None:
    a = ctx.args
    ctx.use(a.scores)
    table = metrics.ScoreTable.read_csv(a.scores)
    groups = table.by_evaluator()
    hits = {}
    with open(ctx.out / "distributions.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["evaluator", "group", "n", "mean", "median", "std", "min", "max"])
        for name in sorted(groups):
            sub = groups[name]
            hr = metrics.hit_rate(sub)
            hits[name] = {"hits": hr.hits, "total": hr.total, "percent": round(hr.percent, 2), "report": str(hr)}
            for group, vals in (("generated", [r.generated for r in sub.rows]),
                                ("native", [r.native for r in sub.rows])):
                v = np.asarray(vals)
                w.writerow([name, group, len(v)] + [repr(float(f(v))) for f in
                                                    (np.mean, np.median, np.std, np.min, np.max)])
    screening.write_json(hits, ctx.out / "hit_rates.json")


def cmd_export_features(ctx: Context) -> None:
    a = ctx.args
    model, source = _load_predictor(ctx, a.checkpoint)
    pairs = load_corpus(ctx)
    stages = tuple(a.stages.split(",")) if a.stages else peppi.FEATURE_STAGES
    peppi.export_features(model, pairs, source, ctx.out / "features.json", stages)


COMMANDS = {
    "prepare": cmd_prepare,
    "make-synthetic": cmd_make_synthetic,
    "train-predict": cmd_train_predict,
    "train-generate": cmd_train_generate,
    "eval": cmd_eval,
    "generate": cmd_generate,
    "rank": cmd_rank,
    "background-compare": cmd_background_compare,
    "ala-scan": cmd_ala_scan,
    "low-homology": cmd_low_homology,
    "ingest-scores": cmd_ingest_scores,
    "export-features": cmd_export_features,
}


# ---------------------------------------------------------------- parser

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _corpus_args(p):
    p.add_argument("--corpus", help="directory holding peptides.fasta, proteins.fasta, pairs.tsv, sites.json")
    p.add_argument("--peptides")
    p.add_argument("--proteins")
    p.add_argument("--pairs")
    p.add_argument("--sites")


def _target_args(p):
    p.add_argument("--target", required=True, help="FASTA with the target protein")
    p.add_argument("--target-id")


def _sampling_args(p):
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--length", type=int, help="emit exactly this many residues")
    p.add_argument("--greedy", action="store_true")
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--sample-top-k", type=int, default=10)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config; unknown keys are rejected")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--threads", type=int, default=1)

    parser = _Parser(prog="pepscreen", description="Peptide-protein screening toolkit")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("prepare", parents=[common], help="clean positives, sample negatives, assign folds")
    _corpus_args(p)

    p = sub.add_parser("make-synthetic", parents=[common], help="write a planted-rule benchmark corpus")
    p.add_argument("--kind", choices=["motif", "interface", "family"], default="motif")
    p.add_argument("--n-train", type=int, default=512)
    p.add_argument("--n-test", type=int, default=256)
    p.add_argument("--pep-len", type=int, default=12)
    p.add_argument("--prot-len", type=int, default=32)
    p.add_argument("--decoys", type=int, default=0)

    p = sub.add_parser("train-predict", parents=[common], help="train the interaction predictor")
    _corpus_args(p)
    p.add_argument("--stage", choices=["pair", "residue"], default="pair")
    p.add_argument("--init", help="pair-level checkpoint to transfer from (residue stage)")
    p.add_argument("--freeze-backbone", action="store_true")
    p.add_argument("--preset", choices=sorted(peppi.ABLATION_SERIES))
    p.add_argument("--folds", help="fold manifest; trains on all folds but --fold")
    p.add_argument("--fold", type=int, default=0)
    p.add_argument("--validation", help="pairs file used for validation metrics")

    p = sub.add_parser("train-generate", parents=[common], help="train the target-conditioned generator")
    _corpus_args(p)
    p.add_argument("--validation")

    p = sub.add_parser("eval", parents=[common], help="metrics for predictor checkpoints")
    _corpus_args(p)
    p.add_argument("--checkpoint", action="append", required=True)
    p.add_argument("--folds")
    p.add_argument("--task", choices=["pair", "residue"], default="pair")

    p = sub.add_parser("generate", parents=[common], help="sample peptides for a target")
    p.add_argument("--checkpoint", required=True)
    _target_args(p)
    _sampling_args(p)
    p.add_argument("--trace", action="store_true", help="also export cross-attention maps")

    p = sub.add_parser("rank", parents=[common], help="score and rank candidates")
    p.add_argument("--predictor", required=True)
    _target_args(p)
    p.add_argument("--candidates", help="candidate FASTA")
    p.add_argument("--generator", help="generator checkpoint; candidates are sampled first")
    p.add_argument("--top-k", type=int)
    _sampling_args(p)

    p = sub.add_parser("background-compare", parents=[common], help="candidates against background peptides")
    p.add_argument("--predictor", required=True)
    _target_args(p)
    p.add_argument("--ranked", required=True, help="ranked.csv from the rank command")
    p.add_argument("--background", required=True, help="background peptide FASTA")

    p = sub.add_parser("ala-scan", parents=[common], help="single-site substitution sensitivity")
    p.add_argument("--predictor", required=True)
    _target_args(p)
    p.add_argument("--peptide", required=True)
    p.add_argument("--peptide-id", default="query")

    p = sub.add_parser("low-homology", parents=[common], help="retrain without near neighbours of the target")
    _corpus_args(p)
    _target_args(p)
    p.add_argument("--known", required=True, help="FASTA of known binders")
    p.add_argument("--threshold", type=float)
    p.add_argument("--predictor", help="reuse this checkpoint instead of retraining")
    p.add_argument("--generator")
    p.add_argument("--top-k", type=int)
    _sampling_args(p)

    p = sub.add_parser("ingest-scores", parents=[common], help="hit rates from external interface scores")
    p.add_argument("--scores", required=True)

    p = sub.add_parser("export-features", parents=[common], help="intermediate predictor features")
    p.add_argument("--checkpoint", required=True)
    _corpus_args(p)
    p.add_argument("--stages", help=f"comma list from {','.join(peppi.FEATURE_STAGES)}")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    clock = screening.Stopwatch()
    try:
        if args.threads < 1:
            raise UsageError("--threads must be at least 1")
        ctx = Context(args)
        COMMANDS[args.command](ctx)
        ctx.finish(clock)
    except UsageError as exc:
        print(f"pepscreen: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FloatingPointError as exc:
        print(f"pepscreen: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, OSError, KeyError) as exc:
        print(f"pepscreen: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
