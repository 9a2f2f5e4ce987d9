"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

The end-to-end experiment (criterion 6) is shared with criteria 3 and 8 via a
session fixture so the whole gate stays inside the runtime budget.
"""

import math
import sys
import time
from collections import Counter

import numpy as np
import pytest
import scipy.sparse as sp
from fastapi.testclient import TestClient

from xtars.classifier import top_n, train_classifier
from xtars.corpus import (
    Source,
    augment_rare,
    build_dataset,
    generate_synthetic_corpus,
    make_splits,
    verify_no_leakage,
    xtars_training_view,
)
from xtars.ensemble import (
    bracket_partition,
    predictive_entropy,
    predictive_entropy_rows,
    train_ensemble,
)
from xtars.evaluation import (
    Prediction,
    bracket_report,
    candidate_recall_at_n,
    frequency_report,
)
from xtars.matcher import (
    LabelEmbeddings,
    SamplerConfig,
    fit_xtars_matcher,
    sample_negatives_xtars,
    topk_softmax_distribution,
    xtars_predict_many,
)
from xtars.ontology import generate_synthetic_ontology, save_ontology
from xtars.optim import logistic_dense, softmax_xent_dense
from xtars.serving import ModelBundle, create_app, write_bundle_manifest


_CAPTURE_MANAGER = None


@pytest.fixture(scope="session", autouse=True)
def _capture_manager(request):
    global _CAPTURE_MANAGER
    _CAPTURE_MANAGER = request.config.pluginmanager.getplugin("capturemanager")


def report_line(number: int, name: str, ok: bool) -> None:
    line = f"ACCEPTANCE {number} ({name}): {'PASS' if ok else 'FAIL'}\n"
    if _CAPTURE_MANAGER is not None:
        # bypass pytest's capture so the line always reaches the terminal
        with _CAPTURE_MANAGER.global_and_fixture_disabled():
            sys.stdout.write(line)
            sys.stdout.flush()
    else:
        sys.__stdout__.write(line)
        sys.__stdout__.flush()


def check(number, name, ok):
    report_line(number, name, bool(ok))
    assert ok, f"acceptance criterion {number} ({name}) failed"


# ---------------------------------------------------------------------------
# shared end-to-end experiment (used by criteria 3, 6, 8)

CLF_HP = dict(n_features=2**13, n_epochs=8, batch_size=64, learning_rate=0.05)
MATCHER_HP = dict(n_features=2**13, n_epochs=5, batch_size=64, learning_rate=0.05)
MATCHER_TEMPERATURE = 1.0  # the best-performing configuration uses T=1


def synthetic_embeddings(sims: np.ndarray) -> LabelEmbeddings:
    """Embeddings whose cosine to the gold label 'g' equals sims[i] exactly."""
    k = len(sims)
    codes = ["g"] + [f"n{i:04d}" for i in range(k)]
    rows = sp.lil_matrix((k + 1, k + 1))
    rows[0, 0] = 1.0
    for i, s in enumerate(sims):
        rows[i + 1, 0] = s
        rows[i + 1, i + 1] = math.sqrt(max(0.0, 1.0 - s * s))
    names = {c: f"label {c}" for c in codes}
    return LabelEmbeddings(codes, names, rows.tocsr())


@pytest.fixture(scope="session")
def experiment():
    """Criterion 6 experiment: 3 seeds x (3-member ensemble + 2 matchers)."""
    t0 = time.time()
    ontology = generate_synthetic_ontology(500, 150, rng_seed=7)
    results = []
    for seed in (1, 2, 3):
        corpus = generate_synthetic_corpus(ontology, n_records=6000, rng_seed=seed)
        records, augmented, _ = build_dataset(corpus, ontology, rng_seed=seed)
        ds = make_splits(records, augmented, rng_seed=seed)
        ensemble = train_ensemble(
            ds.train, ds.validation, CLF_HP,
            seeds=(seed * 10 + 1, seed * 10 + 2, seed * 10 + 3),
            classes=sorted(ontology.codes()),
        )
        embeddings = LabelEmbeddings.from_ontology(ontology, ensemble.members[0].featurizer_)
        view = xtars_training_view(ds, val_cap=200, rng_seed=seed)
        matchers = {}
        for strategy, cfg in (
            ("top5+cos", SamplerConfig(neg=5, temperature=MATCHER_TEMPERATURE,
                                       use_clf_top=True)),
            ("cos", SamplerConfig(neg=5, temperature=MATCHER_TEMPERATURE,
                                  use_clf_top=False)),
        ):
            matchers[strategy] = fit_xtars_matcher(
                view, ensemble, embeddings, cfg, hparams=MATCHER_HP, seed=seed * 100 + 1
            )
        results.append({
            "seed": seed,
            "split": ds,
            "ensemble": ensemble,
            "embeddings": embeddings,
            "matchers": matchers,
        })
    return {
        "ontology": ontology,
        "runs": results,
        "train_seconds": time.time() - t0,
    }


# ---------------------------------------------------------------------------
# criterion 1: sampling-distribution fidelity


def test_criterion_1_sampling_fidelity():
    t0 = time.time()
    rng = np.random.default_rng(2024)
    ok = True
    for _ in range(20):
        k_total = int(rng.integers(10, 1001))
        neg = int(rng.integers(1, 9))
        temperature = float(rng.choice([0.01, 0.1, 1.0]))
        sims = rng.random(k_total)
        emb = synthetic_embeddings(sims)
        cfg = SamplerConfig(neg=neg, k_multiplier=3, temperature=temperature)
        codes_k, probs = topk_softmax_distribution("g", emb, cfg)
        draw_rng = np.random.default_rng(int(rng.integers(2**31)))
        draws = sample_negatives_xtars("g", emb, cfg, draw_rng, n_draws=100_000)
        # the first negative of each draw follows the analytic distribution
        freq = Counter(d[0] for d in draws)
        empirical = np.array([freq.get(c, 0) / 100_000 for c in codes_k])
        tv = 0.5 * np.abs(empirical - probs).sum() + 0.5 * (1 - empirical.sum())
        ok &= tv < 0.02
        # labels outside the top-k never appear anywhere in any draw
        support = set(codes_k)
        ok &= all(code in support for d in draws for code in d)
    elapsed = time.time() - t0
    ok &= elapsed < 30.0
    check(1, f"sampling fidelity ({elapsed:.1f}s)", ok)


# ---------------------------------------------------------------------------
# criterion 2: entropy identities


def test_criterion_2_entropy_identities():
    ok = abs(predictive_entropy(np.array([1.0, 0.0, 0.0]))) < 1e-9
    for k in (2, 10, 10**4):
        ok &= abs(predictive_entropy(np.full(k, 1.0 / k)) - math.log(k)) < 1e-9
    rng = np.random.default_rng(0)
    for _ in range(1000):
        k = int(rng.integers(2, 30))
        a = rng.dirichlet(np.ones(k))
        b = rng.dirichlet(np.ones(k))
        mean_entropy = predictive_entropy((a + b) / 2)
        entropy_mean = (predictive_entropy(a) + predictive_entropy(b)) / 2
        ok &= mean_entropy >= entropy_mean - 1e-9
    check(2, "entropy identities", ok)


# ---------------------------------------------------------------------------
# criterion 3: pruning bound


def test_criterion_3_pruning_bound(experiment):
    run = experiment["runs"][0]
    ds, ensemble = run["split"], run["ensemble"]
    matcher = run["matchers"]["top5+cos"]
    embeddings = run["embeddings"]
    ok = True
    for n in (1, 5, 10):
        recall = candidate_recall_at_n(ensemble, ds.test, n)
        preds = xtars_predict_many(ensemble, matcher, embeddings,
                                   [r.rt for r in ds.test], n)
        acc = float(np.mean([p.llt_code == r.llt_code for p, r in zip(preds, ds.test)]))
        ok &= acc <= recall
    check(3, "pruning bound accuracy <= recall@n", ok)


# ---------------------------------------------------------------------------
# criterion 4: gradient checks


def test_criterion_4_gradient_checks():
    rng = np.random.default_rng(11)
    ok = True

    k, d, n = 4, 32, 6
    coef = rng.normal(scale=0.5, size=(d, k))
    X = sp.csr_matrix(rng.normal(size=(n, d)) * (rng.random((n, d)) < 0.3))
    y = rng.integers(k, size=n)
    _, grad = softmax_xent_dense(coef, X, y)
    h = 1e-6
    for _ in range(20):
        i, j = rng.integers(d), rng.integers(k)
        bump = np.zeros_like(coef)
        bump[i, j] = h
        lp, _ = softmax_xent_dense(coef + bump, X, y)
        lm, _ = softmax_xent_dense(coef - bump, X, y)
        numeric = (lp - lm) / (2 * h)
        ok &= abs(numeric - grad[i, j]) / max(abs(numeric), abs(grad[i, j]), 1e-8) < 1e-4

    w = rng.normal(scale=0.5, size=d)
    b = float(rng.normal())
    Xb = sp.csr_matrix(rng.normal(size=(n, d)) * (rng.random((n, d)) < 0.4))
    yb = rng.integers(2, size=n).astype(float)
    _, gw, gb = logistic_dense(w, b, Xb, yb)
    for i in rng.integers(d, size=15):
        bump = np.zeros_like(w)
        bump[i] = h
        lp, _, _ = logistic_dense(w + bump, b, Xb, yb)
        lm, _, _ = logistic_dense(w - bump, b, Xb, yb)
        numeric = (lp - lm) / (2 * h)
        ok &= abs(numeric - gw[i]) / max(abs(numeric), abs(gw[i]), 1e-8) < 1e-4
    lp, _, _ = logistic_dense(w, b + h, Xb, yb)
    lm, _, _ = logistic_dense(w, b - h, Xb, yb)
    ok &= abs((lp - lm) / (2 * h) - gb) / max(abs(gb), 1e-8) < 1e-4
    check(4, "gradient checks", ok)


# ---------------------------------------------------------------------------
# criterion 5: pipeline-protocol checks


def levenshtein(a: str, b: str) -> int:
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, start=1):
        cur = [i]
        for j, cb in enumerate(b, start=1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def test_criterion_5_pipeline_protocol():
    ontology = generate_synthetic_ontology(120, 40, rng_seed=7)
    corpus = generate_synthetic_corpus(ontology, n_records=1500, rng_seed=2)
    records, augmented, _ = build_dataset(corpus, ontology, rng_seed=2)
    ds = make_splits(records, augmented, rng_seed=4)

    n_coded = sum(1 for r in records if r.source is Source.CODED)
    n_test_expected = math.ceil(0.05 * n_coded)
    n_val_expected = math.floor(0.10 * (n_coded - n_test_expected))
    ok = len(ds.test) == n_test_expected
    ok &= len(ds.validation) == n_val_expected

    # exhaustive leakage scan
    ok &= verify_no_leakage(ds) == []
    val_ids = {r.id for r in ds.validation}
    ok &= not any(
        r.origin_id in val_ids
        for r in ds.train
        if r.source is Source.AUGMENTED
    )

    # augment_rare: exactly 2 variants per rare-class record, each 1 edit away
    base = [r for r in records if r.source is Source.CODED]
    counts = Counter(r.llt_code for r in base)
    rare_records = [r for r in base if counts[r.llt_code] < 10]
    variants = augment_rare(base, rare_threshold=10, rng_seed=9)
    ok &= len(variants) == 2 * len(rare_records)
    by_id = {r.id: r for r in base}
    ok &= all(levenshtein(by_id[v.origin_id].rt, v.rt) == 1 for v in variants)
    check(5, "pipeline protocol (splits, leakage, augmentation)", ok)


# ---------------------------------------------------------------------------
# criterion 6: synthetic end-to-end experiment


def test_criterion_6_end_to_end(experiment):
    ontology = experiment["ontology"]
    ens_accs = []
    btm25 = {"top5+cos": [], "cos": []}
    cells_ok = True
    long_tail_ok = True
    for run in experiment["runs"]:
        ds, ensemble = run["split"], run["ensemble"]
        embeddings = run["embeddings"]

        # long-tail shape: >= 30% of classes have <= 5 raw training samples
        freq = Counter(
            r.llt_code for r in ds.train if r.source in
            (Source.CODED, Source.AUTOCODED, Source.SYNONYM)
        )
        n_small = sum(1 for c in ontology.codes() if freq.get(c, 0) <= 5)
        long_tail_ok &= n_small >= 0.3 * len(ontology)

        rts = [r.rt for r in ds.test]
        gold = {r.id: r.llt_code for r in ds.test}
        probs = ensemble.predict_proba(rts)
        entropies = predictive_entropy_rows(probs)
        partition = bracket_partition(entropies, ids=[r.id for r in ds.test])
        top1 = [top_n(row, ensemble.label_index_, 1)[0] for row in probs]
        ens_accs.append(
            float(np.mean([c == r.llt_code for (c, _), r in zip(top1, ds.test)]))
        )

        # (b) PT accuracy >= LLT accuracy on every cell of every report
        ens_preds = [
            Prediction(r.id, code, float(p), float(h))
            for r, (code, p), h in zip(ds.test, top1, entropies)
        ]
        for cell in bracket_report(ens_preds, gold, partition, ontology).values():
            if cell.count:
                cells_ok &= cell.pt_accuracy >= cell.llt_accuracy
        for cell in frequency_report(ens_preds, gold, dict(freq), ontology).values():
            if cell.count:
                cells_ok &= cell.pt_accuracy >= cell.llt_accuracy

        # (c) bracket accuracy of the two negative-sampling strategies
        members = partition.brackets["btm-25%"]
        for strategy, matcher in run["matchers"].items():
            preds = xtars_predict_many(ensemble, matcher, embeddings, rts, 5)
            xp = [
                Prediction(r.id, p.llt_code, p.match_score, float(h))
                for r, p, h in zip(ds.test, preds, entropies)
            ]
            for cell in bracket_report(xp, gold, partition, ontology).values():
                if cell.count:
                    cells_ok &= cell.pt_accuracy >= cell.llt_accuracy
            hits = [
                p.llt_code == r.llt_code
                for p, r in zip(preds, ds.test)
                if r.id in members
            ]
            btm25[strategy].append(float(np.mean(hits)))

    elapsed = experiment["train_seconds"]
    mean_ens = float(np.mean(ens_accs))
    mean_hard = float(np.mean(btm25["top5+cos"]))
    mean_cos = float(np.mean(btm25["cos"]))
    ok_a = mean_ens >= 50 * (1 / 500)
    ok_c = mean_hard >= mean_cos
    ok_time = elapsed < 600.0
    ok = long_tail_ok and ok_a and cells_ok and ok_c and ok_time
    check(
        6,
        "end-to-end experiment "
        f"(ens {mean_ens:.3f}, btm-25% top5+cos {mean_hard:.3f} vs cos {mean_cos:.3f}, "
        f"{elapsed:.0f}s)",
        ok,
    )


# ---------------------------------------------------------------------------
# criterion 7: CLI determinism


def test_criterion_7_cli_determinism(tmp_path):
    from click.testing import CliRunner

    from xtars.cli import cli

    runner = CliRunner()

    def run(*args):
        result = runner.invoke(cli, [str(a) for a in args])
        assert result.exit_code == 0, result.output
        return result

    def build(root):
        root.mkdir()
        ont = root / "ontology.csv"
        run("gen-ontology", "--num-llt", 40, "--num-pt", 12, "--out", ont, "--seed", 7)
        records = root / "records.jsonl"
        run("ingest", "--ontology", ont, "--synthetic", 400, "--out", records, "--seed", 3)
        splits = root / "splits"
        run("split", "--records", records, "--out-dir", splits, "--seed", 5)
        clf = root / "clf"
        run("train-classifier", "--splits-dir", splits, "--ontology", ont, "--out", clf,
            "--n-features", 2**12, "--epochs", 4, "--seed", 1)
        ens = root / "ens"
        run("train-ensemble", "--splits-dir", splits, "--ontology", ont, "--out", ens,
            "--seeds", "1,2", "--n-features", 2**12, "--epochs", 3)
        matcher = root / "matcher"
        run("train-matcher", "--splits-dir", splits, "--scorer", clf, "--ontology", ont,
            "--out", matcher, "--neg", 3, "--temperature", 1,
            "--n-features", 2**12, "--epochs", 2, "--seed", 1)
        preds = root / "preds.jsonl"
        run("predict", "--model", clf, "--matcher", matcher, "--ontology", ont,
            "--input", splits / "test.jsonl", "--out", preds)
        run("evaluate", "--model", clf, "--matcher", matcher, "--splits-dir", splits,
            "--ontology", ont, "--out", root / "report")

    build(tmp_path / "a")
    build(tmp_path / "b")
    artifacts = [
        "ontology.csv",
        "records.jsonl",
        "splits/train.jsonl", "splits/validation.jsonl", "splits/test.jsonl",
        "splits/summary.json",
        "clf/weights.bin", "clf/labels.csv", "clf/manifest.json",
        "ens/manifest.json",
        "ens/member-00/weights.bin", "ens/member-01/weights.bin",
        "matcher/weights.bin", "matcher/manifest.json",
        "preds.jsonl",
        "report.json", "report.txt",
    ]
    ok = all(
        (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()
        for rel in artifacts
    )
    check(7, "CLI rerun determinism (byte-identical artifacts)", ok)


# ---------------------------------------------------------------------------
# criterion 8: serving contract


def test_criterion_8_serving_contract(experiment, tmp_path):
    run = experiment["runs"][0]
    bundle_dir = tmp_path / "bundle"
    bundle_dir.mkdir()
    save_ontology(experiment["ontology"], bundle_dir / "ontology.csv")
    run["ensemble"].save(bundle_dir / "scorer")
    run["matchers"]["top5+cos"].save(
        bundle_dir / "matcher",
        sampler_config=SamplerConfig(neg=5, temperature=MATCHER_TEMPERATURE),
    )
    write_bundle_manifest(
        bundle_dir, model_version="acceptance", ontology_version="synthetic",
        scorer_type="ensemble", has_matcher=True,
    )
    bundle = ModelBundle.load(bundle_dir)
    client = TestClient(create_app(bundle, max_batch=1024))

    ok = True
    resp = client.post("/predict", json={"rts": ["on and off lethargy"]})
    ok &= resp.status_code == 200
    proposal = resp.json()["proposals"][0]
    pt_code, pt_name = experiment["ontology"].pt_of(proposal["llt_code"])
    ok &= (proposal["pt_code"], proposal["pt_name"]) == (pt_code, pt_name)

    resp = client.post("/predict", json={"rts": []})
    ok &= resp.status_code == 200 and resp.json() == {"proposals": []}

    resp = client.post("/predict", json={"rts": [""]})
    ok &= resp.status_code == 200
    ok &= resp.json()["proposals"][0]["error"] == "empty_rt"

    rts = [r.rt for r in run["split"].test][:64] or ["renal pain"]
    batch = [rts[i % len(rts)] for i in range(1024)]
    t0 = time.time()
    resp = client.post("/predict", json={"rts": batch})
    elapsed = time.time() - t0
    ok &= resp.status_code == 200
    ok &= len(resp.json()["proposals"]) == 1024
    ok &= elapsed < 2.0
    check(8, f"serving contract (1024-item batch {elapsed:.2f}s)", ok)
