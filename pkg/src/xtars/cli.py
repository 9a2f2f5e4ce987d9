"""Pipeline orchestration CLI.

Every subcommand accepts --seed and --config; errors exit nonzero with a
structured JSON object on stderr. Rerunning any step with identical inputs
and seeds yields byte-identical artifacts.
"""

from __future__ import annotations

import functools
import json
import shutil
import sys
from pathlib import Path

import click

from xtars import config as config_mod
from xtars import corpus as corpus_mod
from xtars import evaluation as eval_mod
from xtars import ontology as ontology_mod
from xtars.classifier import SoftmaxTextClassifier, top_n, train_classifier
from xtars.ensemble import DeepEnsemble, bracket_partition, predictive_entropy_rows, train_ensemble
from xtars.matcher import (
    LabelEmbeddings,
    PairMatcher,
    SamplerConfig,
    fit_xtars_matcher,
    xtars_predict_many,
)
from xtars.serving import ENV_MODEL_DIR, ModelBundle, write_bundle_manifest


def structured_errors(func):
    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except click.ClickException:
            raise
        except Exception as exc:  # deliberate: uniform structured CLI errors
            click.echo(
                json.dumps({"error": type(exc).__name__, "message": str(exc)}),
                err=True,
            )
            sys.exit(1)

    return wrapper


def common_options(func):
    func = click.option("--seed", type=int, default=0, show_default=True,
                        help="Global random seed for this step.")(func)
    func = click.option("--config", "config_path", type=click.Path(), default=None,
                        help="JSON config file; flags override its values.")(func)
    return func


def load_scorer(path):
    path = Path(path)
    manifest = path / "manifest.json"
    if not manifest.exists():
        raise click.ClickException(f"missing model artifact: no manifest.json in {path}")
    with open(manifest, encoding="utf-8") as fh:
        model_type = json.load(fh).get("model_type")
    if model_type == "deep_ensemble":
        return DeepEnsemble.load(path)
    if model_type == "softmax_classifier":
        return SoftmaxTextClassifier.load(path)
    raise click.ClickException(f"unsupported model_type {model_type!r} in {manifest}")


def classifier_hparams(cfg, **overrides):
    hp = config_mod.section_with_overrides(cfg, "classifier", **overrides)
    feat = cfg["featurizer"]
    return {
        "n_features": feat["n_features"],
        "char_ngrams": tuple(feat["char_ngrams"]),
        "use_word_unigrams": feat["use_word_unigrams"],
        "hash_seed": feat["hash_seed"],
        **hp,
    }


@click.group()
def cli():
    """Extreme-multiclass text coding pipeline."""


@cli.command("gen-ontology")
@click.option("--num-llt", type=int, required=True)
@click.option("--num-pt", type=int, required=True)
@click.option("--out", type=click.Path(), required=True)
@common_options
@structured_errors
def gen_ontology(num_llt, num_pt, out, seed, config_path):
    """Generate a synthetic two-level ontology CSV."""
    ontology = ontology_mod.generate_synthetic_ontology(num_llt, num_pt, rng_seed=seed)
    ontology_mod.save_ontology(ontology, out)
    click.echo(json.dumps({"ontology": out, "num_llt": len(ontology)}))


@cli.command("ingest")
@click.option("--ontology", "ontology_path", type=click.Path(), required=True)
@click.option("--ontology-version", default="unversioned", show_default=True)
@click.option("--records", "records_path", type=click.Path(), default=None,
              help="Raw records JSONL; omit when using --synthetic.")
@click.option("--synthetic", type=int, default=None,
              help="Generate this many synthetic records instead of reading a file.")
@click.option("--rare-threshold", type=int, default=10, show_default=True)
@click.option("--out", type=click.Path(), required=True)
@common_options
@structured_errors
def ingest(ontology_path, ontology_version, records_path, synthetic, rare_threshold,
           out, seed, config_path):
    """Preprocess, merge ontology-derived records, and augment rare classes."""
    ontology = ontology_mod.load_ontology(ontology_path, version=ontology_version)
    if synthetic is not None:
        raw = corpus_mod.generate_synthetic_corpus(ontology, n_records=synthetic, rng_seed=seed)
    elif records_path is not None:
        raw = corpus_mod.read_records_jsonl(records_path)
    else:
        raise click.ClickException("provide --records or --synthetic")
    records, augmented, stats = corpus_mod.build_dataset(
        raw, ontology, rare_threshold=rare_threshold, rng_seed=seed
    )
    corpus_mod.write_records_jsonl(records + augmented, out)
    click.echo(json.dumps({
        "records": len(records),
        "augmented": len(augmented),
        "dropped_empty": stats.n_dropped_empty,
        "dropped_duplicate": stats.n_dropped_duplicate,
        "dropped_unknown_code": stats.n_dropped_unknown_code,
    }, sort_keys=True))


@cli.command("split")
@click.option("--records", "records_path", type=click.Path(), required=True)
@click.option("--out-dir", type=click.Path(), required=True)
@click.option("--test-fraction", type=float, default=0.05, show_default=True)
@click.option("--val-fraction", type=float, default=0.10, show_default=True)
@common_options
@structured_errors
def split(records_path, out_dir, test_fraction, val_fraction, seed, config_path):
    """Write leakage-safe train/validation/test JSONL files plus a summary."""
    everything = corpus_mod.read_records_jsonl(records_path)
    records = [r for r in everything if r.source is not corpus_mod.Source.AUGMENTED]
    augmented = [r for r in everything if r.source is corpus_mod.Source.AUGMENTED]
    ds = corpus_mod.make_splits(records, augmented, test_fraction, val_fraction, rng_seed=seed)
    corpus_mod.write_split(ds, out_dir)
    click.echo(json.dumps(corpus_mod.split_summary(ds)["sizes"], sort_keys=True))


@cli.command("train-classifier")
@click.option("--splits-dir", type=click.Path(), required=True)
@click.option("--ontology", "ontology_path", type=click.Path(), default=None,
              help="Freeze the label index to all ontology codes.")
@click.option("--out", type=click.Path(), required=True)
@click.option("--n-features", type=int, default=None)
@click.option("--epochs", "n_epochs", type=int, default=None)
@click.option("--batch-size", type=int, default=None)
@click.option("--learning-rate", type=float, default=None)
@common_options
@structured_errors
def train_classifier_cmd(splits_dir, ontology_path, out, n_features, n_epochs,
                         batch_size, learning_rate, seed, config_path):
    """Train the base softmax classifier with validation-based selection."""
    cfg = config_mod.load_config(config_path)
    if n_features is not None:
        cfg["featurizer"]["n_features"] = n_features
    hparams = classifier_hparams(
        cfg, n_epochs=n_epochs, batch_size=batch_size, learning_rate=learning_rate
    )
    ds = corpus_mod.read_split(splits_dir)
    classes = None
    if ontology_path:
        classes = sorted(ontology_mod.load_ontology(ontology_path).codes())
    model = train_classifier(ds.train, ds.validation, hparams, seed=seed, classes=classes)
    model.save(out)
    click.echo(json.dumps({
        "selected_epoch": model.selected_epoch_,
        "validation_accuracy": model.validation_accuracy_,
    }, sort_keys=True))


@cli.command("train-ensemble")
@click.option("--splits-dir", type=click.Path(), required=True)
@click.option("--ontology", "ontology_path", type=click.Path(), default=None)
@click.option("--out", type=click.Path(), required=True)
@click.option("--seeds", default=None, help="Comma-separated member seeds (default config).")
@click.option("--n-features", type=int, default=None)
@click.option("--epochs", "n_epochs", type=int, default=None)
@click.option("--batch-size", type=int, default=None)
@click.option("--learning-rate", type=float, default=None)
@common_options
@structured_errors
def train_ensemble_cmd(splits_dir, ontology_path, out, seeds, n_features, n_epochs,
                       batch_size, learning_rate, seed, config_path):
    """Train a deep ensemble (one member per seed)."""
    cfg = config_mod.load_config(config_path)
    if n_features is not None:
        cfg["featurizer"]["n_features"] = n_features
    hparams = classifier_hparams(
        cfg, n_epochs=n_epochs, batch_size=batch_size, learning_rate=learning_rate
    )
    member_seeds = (
        [int(s) for s in seeds.split(",")] if seeds else list(cfg["ensemble"]["seeds"])
    )
    ds = corpus_mod.read_split(splits_dir)
    classes = None
    if ontology_path:
        classes = sorted(ontology_mod.load_ontology(ontology_path).codes())
    ensemble = train_ensemble(ds.train, ds.validation, hparams, seeds=member_seeds,
                              classes=classes)
    ensemble.save(out)
    click.echo(json.dumps({"members": len(ensemble.members)}, sort_keys=True))


@cli.command("train-matcher")
@click.option("--splits-dir", type=click.Path(), required=True)
@click.option("--scorer", "scorer_path", type=click.Path(), required=True)
@click.option("--ontology", "ontology_path", type=click.Path(), required=True)
@click.option("--out", type=click.Path(), required=True)
@click.option("--neg-strategy", type=click.Choice(["cos", "top5", "top5+cos"]),
              default="top5+cos", show_default=True)
@click.option("--neg", type=int, default=None, help="Cosine negatives per positive.")
@click.option("--temperature", type=float, default=None)
@click.option("--k-multiplier", type=int, default=None)
@click.option("--candidates", "n_candidates", type=int, default=None)
@click.option("--cos-sampler", type=click.Choice(["xtars", "tars"]), default=None)
@click.option("--val-cap", type=int, default=None)
@click.option("--epochs", "n_epochs", type=int, default=None)
@click.option("--batch-size", type=int, default=None)
@click.option("--learning-rate", type=float, default=None)
@click.option("--n-features", type=int, default=None)
@click.option("--freeze-negatives", is_flag=True, default=False,
              help="Sample negatives once instead of each epoch.")
@common_options
@structured_errors
def train_matcher_cmd(splits_dir, scorer_path, ontology_path, out, neg_strategy, neg,
                      temperature, k_multiplier, n_candidates, cos_sampler, val_cap,
                      n_epochs, batch_size, learning_rate, n_features, freeze_negatives,
                      seed, config_path):
    """Train the binary text/label matcher with hard-negative sampling."""
    cfg = config_mod.load_config(config_path)
    m = config_mod.section_with_overrides(
        cfg, "matcher", neg=neg, temperature=temperature, k_multiplier=k_multiplier,
        n_candidates=n_candidates, cos_sampler=cos_sampler, val_cap=val_cap,
        n_epochs=n_epochs, batch_size=batch_size, learning_rate=learning_rate,
    )
    if freeze_negatives:
        m["resample_each_epoch"] = False
    use_clf_top = neg_strategy in ("top5", "top5+cos")
    n_cos = 0 if neg_strategy == "top5" else int(m["neg"])
    sampler = SamplerConfig(
        neg=n_cos,
        k_multiplier=int(m["k_multiplier"]),
        temperature=float(m["temperature"]),
        use_clf_top=use_clf_top,
        n_candidates=int(m["n_candidates"]),
        cos_sampler=m["cos_sampler"],
    )
    feat = cfg["featurizer"]
    if n_features is not None:
        feat["n_features"] = n_features
    hparams = {
        "n_features": feat["n_features"],
        "char_ngrams": tuple(feat["char_ngrams"]),
        "use_word_unigrams": feat["use_word_unigrams"],
        "hash_seed": feat["hash_seed"],
        "n_epochs": int(m["n_epochs"]),
        "batch_size": int(m["batch_size"]),
        "learning_rate": float(m["learning_rate"]),
    }
    scorer = load_scorer(scorer_path)
    ontology = ontology_mod.load_ontology(ontology_path)
    embeddings = LabelEmbeddings.from_ontology(ontology, scorer.featurizer_)
    ds = corpus_mod.read_split(splits_dir)
    view = corpus_mod.xtars_training_view(ds, val_cap=int(m["val_cap"]), rng_seed=seed)
    matcher = fit_xtars_matcher(
        view, scorer, embeddings, sampler, hparams=hparams, seed=seed,
        resample_each_epoch=bool(m["resample_each_epoch"]),
    )
    matcher.save(out, sampler_config=sampler)
    click.echo(json.dumps({
        "selected_epoch": matcher.selected_epoch_,
        "validation_accuracy": matcher.validation_accuracy_,
    }, sort_keys=True))


def _predictions_for(scorer, matcher, embeddings, records, n_candidates, confidence_source):
    """Shared prediction assembly for predict/evaluate."""
    import numpy as np

    rts = [r.rt for r in records]
    probs = scorer.predict_proba(rts)
    entropies = predictive_entropy_rows(probs)
    rows = []
    if matcher is not None:
        xp = xtars_predict_many(scorer, matcher, embeddings, rts, n_candidates)
        for rec, pred, row, h in zip(records, xp, probs, entropies):
            conf = float(np.max(row)) if confidence_source == "max_prob" else pred.match_score
            rows.append((rec, pred.llt_code, conf, float(h)))
    else:
        label_index = scorer.label_index_
        for rec, row, h in zip(records, probs, entropies):
            code, p = top_n(row, label_index, 1)[0]
            rows.append((rec, code, p, float(h)))
    return rows


@cli.command("predict")
@click.option("--model", "model_path", type=click.Path(), required=True)
@click.option("--matcher", "matcher_path", type=click.Path(), default=None)
@click.option("--ontology", "ontology_path", type=click.Path(), required=True)
@click.option("--input", "input_path", type=click.Path(), required=True,
              help="Text file with one reported term per line, or records JSONL.")
@click.option("--out", type=click.Path(), required=True)
@click.option("--candidates", "n_candidates", type=int, default=None)
@click.option("--confidence-source", type=click.Choice(["auto", "max_prob", "match_score"]),
              default="auto")
@common_options
@structured_errors
def predict_cmd(model_path, matcher_path, ontology_path, input_path, out, n_candidates,
                confidence_source, seed, config_path):
    """Batch prediction to JSONL."""
    cfg = config_mod.load_config(config_path)
    scorer = load_scorer(model_path)
    ontology = ontology_mod.load_ontology(ontology_path)
    matcher = embeddings = None
    sampler = None
    if matcher_path:
        matcher, sampler = PairMatcher.load(matcher_path)
        embeddings = LabelEmbeddings.from_ontology(ontology, scorer.featurizer_)
    if n_candidates is None:
        n_candidates = sampler.n_candidates if sampler else cfg["matcher"]["n_candidates"]
    if confidence_source == "auto":
        confidence_source = "match_score" if matcher else "max_prob"

    if str(input_path).endswith(".jsonl"):
        records = corpus_mod.read_records_jsonl(input_path)
    else:
        lines = Path(input_path).read_text(encoding="utf-8").splitlines()
        from datetime import datetime, timezone

        now = datetime(1970, 1, 1, tzinfo=timezone.utc)
        records = [
            corpus_mod.CodedRecord(id=f"q{i:06d}", rt=line.strip().lower(), llt_code="",
                                   source=corpus_mod.Source.CODED, timestamp=now)
            for i, line in enumerate(lines) if line.strip()
        ]
    rows = _predictions_for(scorer, matcher, embeddings, records, n_candidates,
                            confidence_source)
    with open(out, "w", encoding="utf-8") as fh:
        for rec, code, conf, entropy in rows:
            pt_code, pt_name = ontology.pt_of(code)
            fh.write(json.dumps({
                "id": rec.id,
                "rt": rec.rt,
                "llt_code": code,
                "llt_name": ontology.name_of(code),
                "pt_code": pt_code,
                "pt_name": pt_name,
                "confidence": conf,
                "entropy": entropy,
            }, sort_keys=True) + "\n")
    click.echo(json.dumps({"predictions": len(rows)}))


@cli.command("evaluate")
@click.option("--model", "model_path", type=click.Path(), required=True)
@click.option("--matcher", "matcher_path", type=click.Path(), default=None)
@click.option("--splits-dir", type=click.Path(), required=True)
@click.option("--ontology", "ontology_path", type=click.Path(), required=True)
@click.option("--split", "which_split", type=click.Choice(["test", "validation"]),
              default="test", show_default=True)
@click.option("--report", "reports", default="table2,tableA1,backtest", show_default=True,
              help="Comma-separated: table2 (brackets), tableA1 (frequency), backtest.")
@click.option("--threshold", type=float, default=None)
@click.option("--brackets", "brackets_arg", default=None, help="e.g. 0.8,0.5,0.25")
@click.option("--confidence-source", type=click.Choice(["auto", "max_prob", "match_score"]),
              default="auto")
@click.option("--reference-model", "reference_path", type=click.Path(), default=None,
              help="Compute bracket entropies from this model instead of the scorer.")
@click.option("--candidates", "n_candidates", type=int, default=None)
@click.option("--out", "out_prefix", type=click.Path(), default=None,
              help="Write <prefix>.json and <prefix>.txt.")
@common_options
@structured_errors
def evaluate_cmd(model_path, matcher_path, splits_dir, ontology_path, which_split,
                 reports, threshold, brackets_arg, confidence_source, reference_path,
                 n_candidates, out_prefix, seed, config_path):
    """Accuracy reports by certainty bracket and class frequency."""
    cfg = config_mod.load_config(config_path)
    e = cfg["eval"]
    wanted = {t.strip() for t in reports.split(",") if t.strip()}
    unknown = wanted - {"table2", "tableA1", "backtest"}
    if unknown:
        raise click.ClickException(f"unknown report names: {sorted(unknown)}")
    threshold = threshold if threshold is not None else e["threshold"]
    fractions = (
        tuple(float(x) for x in brackets_arg.split(",")) if brackets_arg
        else tuple(e["brackets"])
    )
    scorer = load_scorer(model_path)
    ontology = ontology_mod.load_ontology(ontology_path)
    matcher = embeddings = None
    sampler = None
    if matcher_path:
        matcher, sampler = PairMatcher.load(matcher_path)
        embeddings = LabelEmbeddings.from_ontology(ontology, scorer.featurizer_)
    if n_candidates is None:
        n_candidates = sampler.n_candidates if sampler else cfg["matcher"]["n_candidates"]
    if confidence_source == "auto":
        confidence_source = "match_score" if matcher else "max_prob"

    ds = corpus_mod.read_split(splits_dir)
    records = ds.test if which_split == "test" else ds.validation
    if not records:
        raise click.ClickException(f"{which_split} split is empty")
    rows = _predictions_for(scorer, matcher, embeddings, records, n_candidates,
                            confidence_source)
    if reference_path:
        reference = load_scorer(reference_path)
        ref_probs = reference.predict_proba([r.rt for r in records])
        entropies = predictive_entropy_rows(ref_probs)
    else:
        entropies = [h for _, _, _, h in rows]
    predictions = [
        eval_mod.Prediction(rec.id, code, conf, h)
        for (rec, code, conf, _), h in zip(rows, entropies)
    ]
    gold = {r.id: r.llt_code for r in records}
    partition = bracket_partition(entropies, ids=[r.id for r in records],
                                  fractions=fractions)
    report = eval_mod.build_report(
        predictions, gold, ontology,
        partition=partition if "table2" in wanted else None,
        freq=corpus_mod.class_frequency(ds) if "tableA1" in wanted else None,
        threshold=threshold if "backtest" in wanted else None,
        model_tag=Path(model_path).name
        + (f"+{Path(matcher_path).name}" if matcher_path else ""),
    )
    click.echo(report.render_text())
    if out_prefix:
        Path(str(out_prefix) + ".json").write_text(report.to_json_str(), encoding="utf-8")
        Path(str(out_prefix) + ".txt").write_text(report.render_text(), encoding="utf-8")


@cli.command("bundle")
@click.option("--scorer", "scorer_path", type=click.Path(), required=True)
@click.option("--matcher", "matcher_path", type=click.Path(), default=None)
@click.option("--ontology", "ontology_path", type=click.Path(), required=True)
@click.option("--ontology-version", default="unversioned", show_default=True)
@click.option("--out", type=click.Path(), required=True)
@click.option("--model-version", default="0", show_default=True)
@click.option("--entropy-threshold", type=float, default=None)
@click.option("--candidates", "n_candidates", type=int, default=None)
@common_options
@structured_errors
def bundle_cmd(scorer_path, matcher_path, ontology_path, ontology_version, out,
               model_version, entropy_threshold, n_candidates, seed, config_path):
    """Assemble a self-validating serving bundle from trained artifacts."""
    cfg = config_mod.load_config(config_path)
    out = Path(out)
    if out.exists():
        raise click.ClickException(f"bundle target {out} already exists")
    out.mkdir(parents=True)
    shutil.copyfile(ontology_path, out / "ontology.csv")
    shutil.copytree(scorer_path, out / "scorer")
    if matcher_path:
        shutil.copytree(matcher_path, out / "matcher")
    with open(Path(scorer_path) / "manifest.json", encoding="utf-8") as fh:
        scorer_type = (
            "ensemble" if json.load(fh).get("model_type") == "deep_ensemble" else "classifier"
        )
    write_bundle_manifest(
        out,
        model_version=model_version,
        ontology_version=ontology_version,
        scorer_type=scorer_type,
        has_matcher=bool(matcher_path),
        entropy_threshold=(
            entropy_threshold if entropy_threshold is not None
            else cfg["serve"]["entropy_threshold"]
        ),
        n_candidates=n_candidates if n_candidates is not None else cfg["matcher"]["n_candidates"],
    )
    click.echo(json.dumps({"bundle": str(out)}))


@cli.command("serve")
@click.option("--bundle", "bundle_path", type=click.Path(), default=None,
              envvar=ENV_MODEL_DIR, help=f"Bundle dir (default ${ENV_MODEL_DIR}).")
@click.option("--host", default=None)
@click.option("--port", type=int, default=None)
@click.option("--max-batch", type=int, default=None)
@common_options
@structured_errors
def serve_cmd(bundle_path, host, port, max_batch, seed, config_path):
    """Run the batch prediction HTTP service over a model bundle."""
    from xtars.serving import serve as run_serve

    cfg = config_mod.load_config(config_path)
    s = config_mod.section_with_overrides(
        cfg, "serve", host=host, port=port, max_batch=max_batch
    )
    if not bundle_path:
        raise click.ClickException(
            f"missing model bundle: pass --bundle or set ${ENV_MODEL_DIR}"
        )
    run_serve(bundle_path, host=s["host"], port=s["port"], max_batch=s["max_batch"])


def main():
    cli(prog_name="xtars")


if __name__ == "__main__":
    main()
