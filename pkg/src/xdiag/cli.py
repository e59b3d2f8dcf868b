"""Command-line surface: staged subcommands composing via files.

Each stage reads stores/schemas/models from disk and writes reports
atomically; report-writing paths also emit a CSV and a PNG figure next to
the JSON unless --no-figures is given. Exit codes: 0 success, 1 usage
error, 2 data or validation error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import diagnose, figures, geometry, probe, prompts, rectify, report, store, synthlab

USAGE_EXIT = 1
DATA_EXIT = 2

_DATA_ERRORS = (
    store.StoreError,
    probe.ProbeError,
    probe.TrainingDiverged,
    prompts.TemplateError,
    prompts.SchemaError,
    synthlab.SynthError,
    diagnose.DiagnoseError,
    rectify.RectifyError,
    OSError,
    json.JSONDecodeError,
    KeyError,
    ValueError,
)


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors exit 1, not argparse's default 2
        self.print_usage(sys.stderr)
        self.exit(USAGE_EXIT, f"{self.prog}: error: {message}\n")


def _require_files(*paths: str | None) -> None:
    for p in paths:
        if p is not None and not Path(p).exists():
            raise store.StoreError(f"input path does not exist: {p}")


def _ensure_parent(path: str) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)


def _config_echo(args: argparse.Namespace) -> dict:
    cfg = {k: v for k, v in vars(args).items() if k != "func"}
    return cfg


def _load_text_embed(args) -> tuple[diagnose.TextEmbed, synthlab.PlantedScenario | None]:
    """Prompt-embedding source: a prompt-keyed text store or a synthetic scenario."""
    if getattr(args, "text_store", None):
        _require_files(args.text_store)
        return diagnose.store_text_embed(store.read_store(args.text_store)), None
    if getattr(args, "synth_scenario", None):
        scenario_path = Path(args.synth_scenario) / "scenario.json"
        _require_files(str(scenario_path))
        loaded = synthlab.load_scenario(scenario_path)
        if loaded["kind"] != "planted":
            raise synthlab.SynthError("only planted scenarios provide a text-embedding function")
        scenario = synthlab.gen_planted(loaded["params"])
        return scenario.text_embed, scenario
    raise store.StoreError("one of --text-store or --synth-scenario is required")


def _load_ensemble(args) -> list[str] | None:
    if getattr(args, "ensemble", None):
        if args.ensemble == "builtin":
            return prompts.builtin_ensemble()
        _require_files(args.ensemble)
        return prompts.load_ensemble(args.ensemble)
    return None


# ---------------------------------------------------------------------------
# subcommands


def cmd_info(args) -> int:
    _require_files(args.store)
    st = store.read_store(args.store)
    meta = st.meta
    print(f"store: {args.store}")
    print(f"  n={st.n} d={st.d} modality={st.modality} normalized={st.normalized}")
    print(f"  ids: {'yes' if meta.ids else 'no'}")
    if meta.labels is not None:
        kind = "multilabel" if meta.multilabel else "single-label"
        print(f"  labels: {kind}, classes={meta.class_names}")
    else:
        print("  labels: no")
    fams = sorted(meta.attributes) if meta.attributes else []
    print(f"  attribute families: {fams if fams else 'none'}")
    return 0


def cmd_geometry(args) -> int:
    _require_files(args.image, args.text)
    img = store.read_store(args.image)
    txt = store.read_store(args.text)
    rep = geometry.gap_report(img, txt)
    payload = rep.to_json_dict()
    if args.out is None:
        print(json.dumps(payload, indent=2))
        return 0
    _ensure_parent(args.out)
    report.write_json_report(args.out, "gap_report", payload, _config_echo(args))
    per_pair = geometry.per_pair_stats(img, txt)
    report.write_csv_report(
        report.sibling(args.out, ".csv"),
        ["pair", "magnitude", "direction", "orthogonality_image", "orthogonality_text"],
        [[r["pair"], r["magnitude"], r["direction"], r["orthogonality_image"], r["orthogonality_text"]] for r in per_pair],
    )
    if not args.no_figures:
        figures.gap_figure(per_pair, report.sibling(args.out, ".png"))
    return 0


_LOSS_TO_TASK = {"ce": "multiclass", "bce": "multilabel", "quad": "quadratic"}


def cmd_train(args) -> int:
    _require_files(args.train, args.val)
    train_store = store.read_store(args.train)
    val_store = store.read_store(args.val)
    task = _LOSS_TO_TASK[args.loss]
    if train_store.meta.labels is None:
        raise probe.ProbeError("training store has no labels")
    if train_store.meta.class_names is None:
        raise probe.ProbeError("training store has no class names")
    n_classes = len(train_store.meta.class_names)
    cfg = probe.TrainConfig(
        learning_rate=args.lr,
        epochs=args.epochs,
        batch_size=args.batch_size,
        seed=args.seed,
        ridge_lambda=args.ridge_lambda,
    )
    if task == "quadratic":
        if args.model != "linear":
            raise probe.ProbeError("the quadratic loss requires a linear model")
        X = np.asarray(train_store.matrix, dtype=np.float64)
        mean = None
        model = None
        if args.close_gap:
            closed, mean = geometry.close_gap(train_store)
            X = closed.matrix
        labels = [int(l) for l in train_store.meta.labels]
        dist = probe.empirical_distribution(labels, n_classes)
        T = probe.balanced_targets(labels, dist)
        model = probe.ridge_fit(X, T, cfg.ridge_lambda)
        if mean is not None:
            model.gap_closing = {train_store.modality: mean}
        model.config = cfg.to_json_dict()
        model.seed = cfg.seed
    else:
        skeleton = (
            probe.linear_probe(train_store.d, n_classes, task)
            if args.model == "linear"
            else probe.mlp_probe(train_store.d, n_classes, hidden=args.hidden, task=task)
        )
        model = probe.train(skeleton, train_store, val_store, cfg, close_gap=args.close_gap)
    _ensure_parent(args.out)
    probe.save_model(model, args.out)
    return 0


def _eval_store(model, st):
    scores, hard = probe.predict(model, st.matrix, modality=st.modality)
    if st.meta.labels is None:
        raise probe.ProbeError("evaluation store has no labels")
    return scores, hard, probe.metrics(scores, hard, st.meta.labels, model.task)


def cmd_eval(args) -> int:
    _require_files(args.model, args.store)
    model = probe.load_model(args.model)
    st = store.read_store(args.store)
    if args.modality:
        st = dataclasses.replace(st, modality=args.modality)
    scores, hard, rep = _eval_store(model, st)
    payload = rep.to_json_dict()
    if args.consistency_with:
        _require_files(args.consistency_with)
        other = store.read_store(args.consistency_with)
        _, other_hard = probe.predict(model, other.matrix, modality=other.modality)
        payload["consistency"] = probe.consistency(hard, other_hard)
        payload["consistency_with"] = args.consistency_with
    if args.out:
        _ensure_parent(args.out)
        report.write_json_report(args.out, "eval_report", payload, _config_echo(args))
    else:
        print(json.dumps(payload, indent=2))
    return 0


def _load_schema_templates(args):
    _require_files(args.schema, args.templates)
    schema = prompts.load_schema(args.schema)
    templates = prompts.load_templates(args.templates)
    return schema, templates


def cmd_slices(args) -> int:
    _require_files(args.model)
    model = probe.load_model(args.model)
    schema, templates = _load_schema_templates(args)
    ensemble = _load_ensemble(args)
    text_embed, _ = _load_text_embed(args)
    image_store = None
    if args.images:
        _require_files(args.images)
        image_store = store.read_store(args.images)
    slices = diagnose.enumerate_slices(schema, max_slices=args.max_slices)
    rep = diagnose.slice_eval(
        model, text_embed, schema, templates, slices,
        image_store=image_store, ensemble=ensemble, max_ensemble=args.max_ensemble,
    )
    ranked = diagnose.discover(
        rep, top_k=args.top_k, threshold_delta=args.delta,
        merge=args.merge, merge_epsilon=args.merge_epsilon,
    )
    payload = {
        "rows": [r.to_json_dict() for r in ranked],
        "global_error": rep.global_error,
        "mean_proxy": rep.mean_proxy(),
        "n_slices_evaluated": len(rep.rows),
    }
    _ensure_parent(args.out)
    report.write_json_report(args.out, "slice_report", payload, _config_echo(args))
    report.write_csv_report(
        report.sibling(args.out, ".csv"),
        ["slice", "n_text_prompts", "proxy_score", "text_accuracy", "image_n", "image_accuracy", "is_error"],
        [
            [r.slice.name, r.n_text_prompts, r.proxy_score, r.text_accuracy, r.image_n, r.image_accuracy, r.is_error]
            for r in ranked
        ],
    )
    if not args.no_figures:
        figures.slice_figure([r.to_json_dict() for r in ranked], report.sibling(args.out, ".png"))
    return 0


def cmd_attrs(args) -> int:
    _require_files(args.model)
    model = probe.load_model(args.model)
    schema, templates = _load_schema_templates(args)
    ensemble = _load_ensemble(args)
    text_embed, _ = _load_text_embed(args)
    method = "monte_carlo" if args.mc else "exact"
    rep = diagnose.influence_report(
        model, schema, templates, args.class_name, text_embed,
        method=method, permutations=args.mc or 10_000, seed=args.seed,
        ensemble=ensemble, max_ensemble=args.max_ensemble, threshold=args.threshold,
    )
    _ensure_parent(args.out)
    report.write_json_report(args.out, "influence_report", rep.to_json_dict(), _config_echo(args))
    report.write_csv_report(
        report.sibling(args.out, ".csv"),
        ["class", "family", "token", "influence", "stderr", "influential"],
        [[r.class_name, r.family, r.token, r.influence, r.stderr, r.influential] for r in rep.rows],
    )
    if not args.no_figures:
        figures.influence_figure([r.to_json_dict() for r in rep.rows], report.sibling(args.out, ".png"))
    return 0


def _read_slice_file(path: str, schema) -> list[diagnose.Slice]:
    obj = json.loads(Path(path).read_text(encoding="utf-8"))
    if isinstance(obj, dict) and "rows" in obj:
        assignments = [row["assignment"] for row in obj["rows"] if row.get("is_error")]
        if not assignments:
            raise diagnose.DiagnoseError(
                f"no error-flagged slices in {path}; pass an explicit slice list"
            )
    elif isinstance(obj, dict) and "slices" in obj:
        assignments = obj["slices"]
    elif isinstance(obj, list):
        assignments = obj
    else:
        raise diagnose.DiagnoseError(f"unrecognized slice file layout in {path}")
    return [diagnose.Slice.from_mapping(schema, a) for a in assignments]


def cmd_rectify(args) -> int:
    _require_files(args.model, args.slices)
    model = probe.load_model(args.model)
    schema, templates = _load_schema_templates(args)
    ensemble = _load_ensemble(args)
    text_embed, _ = _load_text_embed(args)
    slices = _read_slice_file(args.slices, schema)
    cfg = rectify.rectify_config(
        seed=args.seed, epochs=args.epochs, learning_rate=args.lr, batch_size=args.batch_size
    )
    new_model = rectify.rectify(
        model, slices, schema, templates, text_embed, cfg,
        ensemble=ensemble, max_ensemble=args.max_ensemble, from_scratch=args.from_scratch,
    )
    _ensure_parent(args.out)
    probe.save_model(new_model, args.out)
    if args.compare_store:
        _require_files(args.compare_store)
        eval_store = store.read_store(args.compare_store)
        rect_set = rectify.build_rectification_set(
            slices, schema, templates, text_embed, ensemble, args.max_ensemble
        )
        rep = rectify.compare(
            model, new_model, eval_store, slices, schema,
            config={
                "epochs": args.epochs,
                "learning_rate": args.lr,
                "seed": args.seed,
                "prompt_counts": rect_set.prompt_counts,
            },
        )
        out = report.sibling(args.out, ".report.json")
        report.write_json_report(out, "rectify_report", rep.to_json_dict(), _config_echo(args))
        report.write_csv_report(
            report.sibling(args.out, ".report.csv"),
            ["slice", "n_rows", "accuracy_before", "accuracy_after", "delta"],
            [[r.name, r.n_rows, r.accuracy_before, r.accuracy_after, r.delta] for r in rep.rows],
        )
        if not args.no_figures:
            figures.rectify_figure([r.to_json_dict() for r in rep.rows], report.sibling(args.out, ".report.png"))
    return 0


def cmd_correlate(args) -> int:
    _require_files(args.text_report, args.image_report)
    text_doc = json.loads(Path(args.text_report).read_text(encoding="utf-8"))
    image_doc = json.loads(Path(args.image_report).read_text(encoding="utf-8"))
    text_rows = {r["slice"]: r for r in text_doc["rows"]}
    image_rows = {r["slice"]: r for r in image_doc["rows"]}
    common = [name for name in text_rows if name in image_rows]
    if len(common) < 3:
        raise diagnose.DiagnoseError(f"only {len(common)} slices shared between the two reports")
    text_scores, image_scores = [], []
    for name in common:
        acc = image_rows[name].get("image_accuracy")
        if acc is None:
            raise diagnose.DiagnoseError(f"slice {name!r} has no image accuracy in {args.image_report}")
        text_scores.append(text_rows[name]["proxy_score"])
        image_scores.append(acc)
    rep = diagnose.correlate(text_scores, image_scores, names=common)
    _ensure_parent(args.out)
    payload = rep.to_json_dict()
    report.write_json_report(args.out, "correlation_report", payload, _config_echo(args))
    report.write_csv_report(
        report.sibling(args.out, ".csv"),
        ["slice", "text_score", "image_score"],
        [[name, t, i] for name, t, i in rep.pairing],
    )
    if not args.no_figures:
        figures.correlation_figure(payload["pairing"], rep.spearman, rep.pearson, report.sibling(args.out, ".png"))
    return 0


def cmd_prompts(args) -> int:
    schema, templates = _load_schema_templates(args)
    ensemble = _load_ensemble(args)
    manifest = prompts.manifest_prompts(schema, templates, ensemble, args.max_ensemble)
    _ensure_parent(args.out)
    report.atomic_write_text(args.out, "\n".join(manifest) + "\n")
    print(f"wrote {len(manifest)} prompts to {args.out}")
    return 0


def cmd_synth(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.scenario == "prop1":
        params = synthlab.Prop1Params(
            d=args.d, n=args.n, classes=args.classes, gap_norm=args.gap_norm,
            tau=args.tau, class_separation=args.class_sep, noise=args.noise, seed=args.seed,
        )
        img, txt, gap = synthlab.gen_prop1(params)
        store.write_store(img, out / "img.emb")
        store.write_store(txt, out / "txt.emb")
        doc = params.to_json_dict()
        doc["gap"] = [float(v) for v in gap]
        report.atomic_write_text(out / "scenario.json", json.dumps(doc, indent=2) + "\n")
    elif args.scenario == "planted":
        scale_parts = [float(v) for v in str(args.scale).split(",")]
        params = synthlab.PlantedParams(
            n_classes=args.classes,
            nuisance_sizes=tuple(int(v) for v in args.nuisance.split(",")),
            correlation=args.correlation,
            unseen_combos=tuple(
                tuple(int(x) for x in combo.split(":")) for combo in args.unseen.split(",") if combo
            ),
            n_train=args.n_train, n_val=args.n_val, d=args.d,
            direction_scale=scale_parts[0] if len(scale_parts) == 1 else tuple(scale_parts),
            noise=args.noise, gap_scale=args.gap, seed=args.seed,
        )
        scenario = synthlab.gen_planted(params)
        store.write_store(scenario.train, out / "train.emb")
        store.write_store(scenario.val, out / "val.emb")
        report.atomic_write_text(
            out / "schema.json", json.dumps(scenario.schema.to_json_dict(), indent=2) + "\n"
        )
        report.atomic_write_text(
            out / "templates.json",
            json.dumps([synthlab.planted_template(params).source], indent=2) + "\n",
        )
        report.atomic_write_text(
            out / "scenario.json", json.dumps(params.to_json_dict(), indent=2) + "\n"
        )
    elif args.scenario in ("spectral", "classmean"):
        residuals = []
        for t in range(args.trials):
            seed = args.seed + t
            if args.scenario == "spectral":
                n = 2 + (t % (args.n_max - 1))
                residuals.append(synthlab.spectral_identity_check(n, args.dim, seed))
            else:
                residuals.append(
                    synthlab.classmean_check(args.n, args.m, args.dim, args.classes, seed)
                )
        payload = {
            "residuals": residuals,
            "max_residual": max(residuals),
            "trials": args.trials,
        }
        report.write_json_report(out / "residuals.json", f"{args.scenario}_check", payload, _config_echo(args))
        report.write_csv_report(
            out / "residuals.csv", ["trial", "residual"], list(enumerate(residuals))
        )
        if not args.no_figures:
            figures.residuals_figure(residuals, out / "residuals.png")
        print(f"{args.scenario}: max residual {max(residuals):.3e} over {args.trials} trials")
    return 0


# ---------------------------------------------------------------------------
# parser wiring


def build_parser() -> _Parser:
    parser = _Parser(prog="xdiag", description=__doc__)
    parser.add_argument("--threads", type=int, default=1, help="worker bound for parallel sections")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("info", parents=[], help="summarize a store file")
    p.add_argument("store")
    p.set_defaults(func=cmd_info)

    p = sub.add_parser("geometry", help="modality-gap geometry report")
    p.add_argument("--image", required=True)
    p.add_argument("--text", required=True)
    p.add_argument("--out")
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_geometry)

    p = sub.add_parser("train", help="train a probe on a store")
    p.add_argument("--train", required=True)
    p.add_argument("--val", required=True)
    p.add_argument("--model", choices=["linear", "mlp"], required=True)
    p.add_argument("--hidden", type=int, default=None)
    p.add_argument("--loss", choices=["ce", "bce", "quad"], required=True)
    p.add_argument("--close-gap", action="store_true")
    p.add_argument("--lambda", dest="ridge_lambda", type=float, default=1e-3)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--epochs", type=int, default=25)
    p.add_argument("--batch-size", type=int, default=256)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a model on a store")
    p.add_argument("--model", required=True)
    p.add_argument("--store", required=True)
    p.add_argument("--modality", choices=["image", "text"])
    p.add_argument("--consistency-with")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    def add_text_source(p):
        group = p.add_mutually_exclusive_group()
        group.add_argument("--text-store")
        group.add_argument("--synth-scenario")

    def add_prompting(p):
        p.add_argument("--schema", required=True)
        p.add_argument("--templates", required=True)
        p.add_argument("--ensemble", help="outer-template JSON file, or 'builtin' for the shipped 80")
        p.add_argument("--max-ensemble", type=int, default=None)

    p = sub.add_parser("slices", help="evaluate and rank attribute slices")
    p.add_argument("--model", required=True)
    add_prompting(p)
    add_text_source(p)
    p.add_argument("--images")
    p.add_argument("--top-k", type=int, default=20)
    p.add_argument("--delta", type=float, default=diagnose.DEFAULT_SLICE_DELTA)
    p.add_argument("--merge", action="store_true")
    p.add_argument("--merge-epsilon", type=float, default=diagnose.DEFAULT_MERGE_EPSILON)
    p.add_argument("--max-slices", type=int, default=512)
    p.add_argument("--out", required=True)
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_slices)

    p = sub.add_parser("attrs", help="attribute influence for one class")
    p.add_argument("--model", required=True)
    add_prompting(p)
    add_text_source(p)
    p.add_argument("--class", dest="class_name", required=True)
    group = p.add_mutually_exclusive_group()
    group.add_argument("--exact", action="store_true")
    group.add_argument("--mc", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threshold", type=float, default=diagnose.DEFAULT_INFLUENCE_THRESHOLD)
    p.add_argument("--out", required=True)
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_attrs)

    p = sub.add_parser("rectify", help="continue training a probe on slice texts")
    p.add_argument("--model", required=True)
    p.add_argument("--slices", required=True)
    add_prompting(p)
    add_text_source(p)
    p.add_argument("--epochs", type=int, default=rectify.RECTIFY_EPOCHS)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=256)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--from-scratch", action="store_true")
    p.add_argument("--compare-store")
    p.add_argument("--out", required=True)
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_rectify)

    p = sub.add_parser("correlate", help="text-proxy vs image-accuracy correlation")
    p.add_argument("--text-report", required=True)
    p.add_argument("--image-report", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_correlate)

    p = sub.add_parser("prompts", help="export the prompt manifest for an embedding adapter")
    add_prompting(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_prompts)

    p = sub.add_parser("synth", help="generate synthetic scenarios and certificates")
    synth_sub = p.add_subparsers(dest="scenario", required=True)

    sp = synth_sub.add_parser("prop1")
    sp.add_argument("--d", type=int, default=32)
    sp.add_argument("--n", type=int, default=500)
    sp.add_argument("--classes", type=int, default=4)
    sp.add_argument("--gap-norm", type=float, default=1.0)
    sp.add_argument("--tau", type=float, default=1.0)
    sp.add_argument("--class-sep", type=float, default=1.0)
    sp.add_argument("--noise", type=float, default=0.1)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_synth)

    sp = synth_sub.add_parser("planted")
    sp.add_argument("--classes", type=int, default=2)
    sp.add_argument("--nuisance", default="2")
    sp.add_argument("--correlation", type=float, default=0.95)
    sp.add_argument("--unseen", default="", help="class:value pairs, comma-separated")
    sp.add_argument("--n-train", type=int, default=1000)
    sp.add_argument("--n-val", type=int, default=800)
    sp.add_argument("--d", type=int, default=16)
    sp.add_argument("--scale", default="1.0", help="direction amplitude, scalar or per-family CSV")
    sp.add_argument("--noise", type=float, default=0.25)
    sp.add_argument("--gap", type=float, default=1.0)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_synth)

    sp = synth_sub.add_parser("spectral")
    sp.add_argument("--n-max", type=int, default=16)
    sp.add_argument("--dim", type=int, default=8)
    sp.add_argument("--trials", type=int, default=100)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--no-figures", action="store_true")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_synth)

    sp = synth_sub.add_parser("classmean")
    sp.add_argument("--n", type=int, default=8)
    sp.add_argument("--m", type=int, default=8)
    sp.add_argument("--dim", type=int, default=12)
    sp.add_argument("--classes", type=int, default=2)
    sp.add_argument("--trials", type=int, default=50)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--no-figures", action="store_true")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_synth)

    return parser


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse --help (0) or usage error (1)
        return int(exc.code or 0)
    try:
        return args.func(args)
    except _DATA_ERRORS as exc:
        print(f"xdiag: error: {exc}", file=sys.stderr)
        return DATA_EXIT


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
