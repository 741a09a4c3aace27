"""Command line interface.

Subcommands: generate, featurize, train-lm, extract, fit, benchmark.
Exit codes: 0 success, 2 configuration error, 3 reproducibility failure.
"""

import argparse
import hashlib
import json
import logging
import sys
from datetime import date
from pathlib import Path

import numpy as np

from clmbench.cohort_io import (
    read_cohort,
    read_examples,
    read_ontology,
    write_cohort,
    write_examples,
    write_ontology,
)
from clmbench.ehr import build_vocabulary, encode_demographics
from clmbench.errors import ConfigurationError, DataError, ReproducibilityError
from clmbench.features import CountFeaturizer, codes_before, pool_code_embeddings, write_feature_matrix
from clmbench.gbt import fit_gbt
from clmbench.harness import ExperimentConfig, emit_report, run_benchmark
from clmbench.labelers import TASKS, label_corpus
from clmbench.lm import (
    ClmbrHyperparams,
    load_checkpoint,
    representations_for_examples,
    save_checkpoint,
    train_language_model,
)
from clmbench.lsi import project_lsi, train_lsi
from clmbench.predictors import fit_logistic, predict_scores
from clmbench.rng import substream
from clmbench.synth import CohortConfig, generate_cohort
from clmbench.word2vec import train_word2vec

log = logging.getLogger(__name__)


def _read_kv_config(path):
    values = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigurationError(f"{path}:{lineno}: expected key = value")
            key, _, value = line.partition("=")
            values[key.strip()] = value.strip()
    return values


def cmd_generate(args):
    values = _read_kv_config(args.config) if args.config else {}
    kwargs = {}
    casts = {
        "num_patients": int, "seed": int, "codes_per_family": int,
        "ontology_branching": int, "ontology_depth": int,
        "num_disease_modules": int, "visit_rate": float,
    }
    for key, cast in casts.items():
        if key in values:
            kwargs[key] = cast(values.pop(key))
    if "date_range" in values:
        start, end = values.pop("date_range").split(",")
        kwargs["date_range"] = (date.fromisoformat(start.strip()), date.fromisoformat(end.strip()))
    if values:
        raise ConfigurationError(f"unknown generator config keys: {sorted(values)}")
    config = CohortConfig(**kwargs)
    corpus, ontology = generate_cohort(config)
    write_cohort(args.out_corpus, corpus)
    write_ontology(args.out_ontology, ontology)
    manifest = {
        "seed": config.seed,
        "num_patients": config.num_patients,
        "config_hash": hashlib.sha256(repr(config).encode()).hexdigest()[:16],
        "corpus_hash": hashlib.sha256(Path(args.out_corpus).read_bytes()).hexdigest(),
    }
    manifest_path = Path(args.out_corpus).with_suffix(".manifest.json")
    manifest_path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    print(f"wrote {args.out_corpus}, {args.out_ontology}, {manifest_path}")
    return 0


def _load_encoded(corpus_path):
    return [encode_demographics(t) for t in read_cohort(corpus_path)]


def cmd_label(args):
    corpus = _load_encoded(args.corpus)
    examples = label_corpus(args.task, corpus)
    write_examples(args.out, examples)
    print(f"wrote {len(examples)} {args.task} examples to {args.out}")
    return 0


def cmd_featurize(args):
    corpus = _load_encoded(args.corpus)
    corpus_by_id = {t.patient_id: t for t in corpus}
    ontology = read_ontology(args.ontology)
    vocabulary = build_vocabulary(corpus, min_patients=args.min_patients)
    examples = read_examples(args.examples)
    opts = dict(pair.split("=", 1) for pair in args.opts) if args.opts else {}
    if args.repr == "counts":
        feat = CountFeaturizer(
            vocabulary,
            ontology,
            time_bins=opts.get("time_bins", "false") == "true",
            ontology_expansion=opts.get("ontology_expansion", "false") == "true",
        )
        matrix = feat.matrix(corpus_by_id, examples)
        columns = feat.column_names()
    elif args.repr == "w2v":
        table = train_word2vec(
            corpus,
            dim=int(opts.get("dim", "300")),
            rng=substream(args.seed, "cli-w2v"),
            vocabulary=vocabulary,
            ontology=ontology,
            ontology_expansion=opts.get("ontology_expansion", "false") == "true",
            epochs=int(opts.get("epochs", "10")),
        )
        mode = opts.get("pooling", "mean")
        rows = [
            pool_code_embeddings(
                codes_before(corpus_by_id[ex.patient_id], ex.prediction_time), table, mode=mode
            )
            for ex in examples
        ]
        matrix = np.array(rows)
        columns = [f"w2v_{i}" for i in range(matrix.shape[1])]
    elif args.repr == "lsi":
        model = train_lsi(
            corpus,
            rank=int(opts.get("rank", "400")),
            rng=substream(args.seed, "cli-lsi"),
            vocabulary=vocabulary,
            ontology=ontology,
            ontology_expansion=opts.get("ontology_expansion", "false") == "true",
        )
        matrix = np.array(
            [project_lsi(corpus_by_id[ex.patient_id], ex.prediction_time, model) for ex in examples]
        )
        columns = [f"lsi_{i}" for i in range(matrix.shape[1])]
    elif args.repr == "clmbr":
        params = load_checkpoint(args.model)
        matrix = representations_for_examples(corpus_by_id, examples, params)
        columns = [f"clmbr_{i}" for i in range(matrix.shape[1])]
    else:
        raise ConfigurationError(f"unknown representation {args.repr!r}")
    write_feature_matrix(args.out, matrix, columns)
    print(f"wrote {matrix.shape[0]}x{matrix.shape[1]} features to {args.out}")
    return 0


def cmd_train_lm(args):
    corpus = _load_encoded(args.corpus)
    ontology = read_ontology(args.ontology)
    vocabulary = build_vocabulary(corpus, min_patients=args.min_patients)
    hp = ClmbrHyperparams(
        embedding_size=args.embedding_size,
        gru_hidden=args.gru_hidden,
        lr=args.lr,
        l2=args.l2,
        dropout=args.dropout,
        epochs=args.epochs,
        batch_days=args.batch_days,
    )
    fit_through = date.fromisoformat(args.fit_through) if args.fit_through else None
    dev_window = None
    if args.dev_start and args.dev_end:
        dev_window = (date.fromisoformat(args.dev_start), date.fromisoformat(args.dev_end))
    params, trace = train_language_model(
        corpus, hp, args.objective, substream(args.seed, "cli-lm"),
        vocabulary, ontology, fit_through=fit_through, dev_window=dev_window,
    )
    save_checkpoint(args.out, params)
    trace_path = Path(args.out).with_suffix(".trace.csv")
    with open(trace_path, "w", encoding="utf-8") as fh:
        fh.write("epoch,train_loss,dev_loss\n")
        for row in trace:
            if "epoch" not in row:
                continue
            dev = repr(row["dev_loss"]) if "dev_loss" in row else ""
            fh.write(f"{row['epoch']},{row['train_loss']!r},{dev}\n")
    print(f"wrote checkpoint {args.out} and loss trace {trace_path}")
    return 0


def cmd_extract(args):
    corpus = _load_encoded(args.corpus)
    corpus_by_id = {t.patient_id: t for t in corpus}
    params = load_checkpoint(args.model)
    examples = read_examples(args.examples)
    matrix = representations_for_examples(corpus_by_id, examples, params)
    write_feature_matrix(args.out, matrix, [f"clmbr_{i}" for i in range(matrix.shape[1])])
    print(f"wrote {matrix.shape[0]}x{matrix.shape[1]} representations to {args.out}")
    return 0


def cmd_fit(args):
    from clmbench.metrics import auroc

    examples = read_examples(args.examples)
    y = np.array([ex.label for ex in examples])
    if args.model == "gru-e2e":
        if not (args.corpus and args.ontology):
            raise ConfigurationError("gru-e2e needs --corpus and --ontology")
        from clmbench.gru_classifier import E2EHyperparams, fit_end_to_end_gru

        corpus = _load_encoded(args.corpus)
        ontology = read_ontology(args.ontology)
        vocabulary = build_vocabulary(corpus, min_patients=args.min_patients)
        corpus_by_id = {t.patient_id: t for t in corpus}
        n_dev = max(1, int(0.3 * len(examples)))
        hp = E2EHyperparams(
            embedding_size=args.embedding_size, gru_hidden=args.gru_hidden,
            lr=args.lr, epochs=args.epochs,
        )
        model = fit_end_to_end_gru(
            corpus_by_id, examples[:-n_dev], examples[-n_dev:], hp,
            substream(args.seed, "cli-e2e"), vocabulary, ontology,
        )
        scores = predict_scores(model, (corpus_by_id, examples))
    else:
        from clmbench.features import read_feature_matrix

        if not args.features:
            raise ConfigurationError(f"{args.model} needs --features")
        X, _ = read_feature_matrix(args.features)
        if X.shape[0] != y.size:
            raise ConfigurationError("feature rows must match example count")
        if args.model == "logistic":
            model = fit_logistic(X, y, C=args.C)
        elif args.model == "gbt":
            n_dev = max(1, int(0.3 * y.size))
            model = fit_gbt(
                X[: y.size - n_dev], y[: y.size - n_dev],
                args.learning_rate, args.num_leaves,
                X[y.size - n_dev :], y[y.size - n_dev :],
            )
        else:
            raise ConfigurationError(f"unknown model {args.model!r}")
        scores = predict_scores(model, X)
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write("example_id,score,label\n")
        for i, (ex, score) in enumerate(zip(examples, scores)):
            fh.write(f"{ex.patient_id}:{ex.prediction_time.isoformat()},{score!r},{ex.label}\n")
    try:
        print(f"train auroc {auroc(scores, y):.4f}; wrote {args.out}")
    except DataError:
        print(f"wrote {args.out}")
    return 0


def cmd_benchmark(args):
    if args.benchmark_command == "run":
        config = ExperimentConfig.from_file(args.config)
        report, manifest = run_benchmark(
            config, out_root=args.out_root, resume=args.resume is not None
        )
        emit_report(report, Path(manifest["artifacts"]["metric_report"]).parent)
        if not report["leakage_guard"]["passed"]:
            raise ReproducibilityError("leakage guard detected pre-evaluation test reads")
        print(f"run complete: {manifest['artifacts']['metric_report']}")
        return 0
    if args.benchmark_command == "report":
        with open(args.manifest, encoding="utf-8") as fh:
            manifest = json.load(fh)
        report_path = manifest["artifacts"]["metric_report"]
        with open(report_path, encoding="utf-8") as fh:
            report = json.load(fh)
        written = emit_report(report, Path(report_path).parent, formats=(args.format,))
        for path in written:
            print(f"wrote {path}")
        return 0
    raise ConfigurationError("benchmark needs a subcommand: run or report")


def build_parser():
    parser = argparse.ArgumentParser(prog="clmbench")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="generate a synthetic cohort")
    p.add_argument("--config", help="flat key=value generator config")
    p.add_argument("--out-corpus", required=True)
    p.add_argument("--out-ontology", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("label", help="emit prediction examples for a task")
    p.add_argument("--corpus", required=True)
    p.add_argument("--task", required=True, choices=TASKS)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_label)

    p = sub.add_parser("featurize", help="build a feature matrix for examples")
    p.add_argument("--repr", required=True, choices=("counts", "w2v", "lsi", "clmbr"))
    p.add_argument("--corpus", required=True)
    p.add_argument("--ontology", required=True)
    p.add_argument("--examples", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--model", help="language model checkpoint (clmbr only)")
    p.add_argument("--min-patients", type=int, default=25)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--opts", nargs="*", help="key=value pairs, e.g. time_bins=true")
    p.set_defaults(func=cmd_featurize)

    p = sub.add_parser("train-lm", help="train the clinical language model")
    p.add_argument("--corpus", required=True)
    p.add_argument("--ontology", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--objective", default="clmbr", choices=("clmbr", "doctorai"))
    p.add_argument("--embedding-size", type=int, default=400)
    p.add_argument("--gru-hidden", type=int, default=800)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--l2", type=float, default=0.01)
    p.add_argument("--dropout", type=float, default=0.1)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--batch-days", type=int, default=2000)
    p.add_argument("--min-patients", type=int, default=25)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--fit-through", help="train on days through this date")
    p.add_argument("--dev-start")
    p.add_argument("--dev-end")
    p.set_defaults(func=cmd_train_lm)

    p = sub.add_parser("extract", help="extract representations for examples")
    p.add_argument("--corpus", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--examples", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("fit", help="fit a prediction model on features")
    p.add_argument("--model", required=True, choices=("logistic", "gbt", "gru-e2e"))
    p.add_argument("--features", help="feature matrix (logistic/gbt)")
    p.add_argument("--examples", required=True)
    p.add_argument("--out", required=True, help="predictions CSV")
    p.add_argument("--C", type=float, default=1.0)
    p.add_argument("--learning-rate", type=float, default=0.1)
    p.add_argument("--num-leaves", type=int, default=25)
    p.add_argument("--corpus", help="cohort JSONL (gru-e2e)")
    p.add_argument("--ontology", help="ontology TSV (gru-e2e)")
    p.add_argument("--embedding-size", type=int, default=16)
    p.add_argument("--gru-hidden", type=int, default=16)
    p.add_argument("--lr", type=float, default=1e-2)
    p.add_argument("--epochs", type=int, default=4)
    p.add_argument("--min-patients", type=int, default=25)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("benchmark", help="run the full protocol or render reports")
    bsub = p.add_subparsers(dest="benchmark_command", required=True)
    pr = bsub.add_parser("run")
    pr.add_argument("--config", required=True)
    pr.add_argument("--resume", help="manifest path to resume from")
    pr.add_argument("--out-root")
    pr.set_defaults(func=cmd_benchmark)
    pp = bsub.add_parser("report")
    pp.add_argument("--manifest", required=True)
    pp.add_argument("--format", default="table", choices=("table", "csv"))
    pp.set_defaults(func=cmd_benchmark)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except ConfigurationError as err:
        print(f"configuration error: {err}", file=sys.stderr)
        return 2
    except ReproducibilityError as err:
        print(f"reproducibility failure: {err}", file=sys.stderr)
        return 3
    except DataError as err:
        print(f"data error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
