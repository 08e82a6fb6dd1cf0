"""Command-line entry point: ``mulgls gen | train | estimate-shift | bench``.

Options may also come from a JSON file given with ``--config``; flags given on
the command line win over file values. Exit codes: 0 success, 1 runtime or
training failure, 2 usage/configuration error.
"""

from __future__ import annotations

import csv
import json
import logging
import sys
import time
from pathlib import Path

import click
import numpy as np

from . import __version__
from .datagen import load_features, make_scenario, save_features, synth_gls
from .embedding import fit_cme, mcmd_matrix_within, rff_build
from .eval import accuracy, metrics_report
from .kernels import FeatureSet, KernelSpec, median_bandwidth
from .label_shift import estimate_shift
from .model import (MulParams, TrainConfig, TrainTrace, adapt, forward, load_params, make_rng,
                    predict, pretrain, save_params)

log = logging.getLogger("mulgls")

REPORT_VERSION = 1
REPORT_FIELDS = ("version", "config", "source_accuracy", "pretrain_target_accuracy",
                 "metrics", "shift")


def _write_json(path, payload):
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _merge_config(ctx: click.Context, config_path, keys):
    """File values for every key whose flag was not given explicitly."""
    values = {k: ctx.params[k] for k in keys}
    if config_path is None:
        return values
    try:
        data = json.loads(Path(config_path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise click.UsageError(f"cannot read config {config_path}: {exc}")
    unknown = set(data) - set(keys)
    if unknown:
        raise click.UsageError(f"unknown config keys in {config_path}: {sorted(unknown)}")
    for k, v in data.items():
        if ctx.get_parameter_source(k) != click.core.ParameterSource.COMMANDLINE:
            values[k] = v
    return values


def _int_list(text):
    if isinstance(text, (list, tuple)):
        return [int(v) for v in text]
    return [int(v) for v in str(text).split(",") if v.strip()]


@click.group()
@click.version_option(__version__)
@click.option("-v", "--verbose", is_flag=True, help="Log progress to stderr.")
def main(verbose):
    """Generalized label shift correction with conditional kernel embeddings."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")


@main.command()
@click.option("--scenario", required=True, help="null, g1 or g2.")
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--n", "n", default=None, type=int, help="Samples per domain (scenario default).")
@click.option("--out", required=True, type=click.Path(file_okay=False, path_type=Path))
def gen(scenario, seed, n, out):
    """Write source.csv, target.csv and oracle.json for a named scenario."""
    try:
        spec = make_scenario(scenario, seed=seed, n=n)
    except ValueError as exc:
        raise click.UsageError(str(exc))
    source, target, oracle = synth_gls(spec)
    out.mkdir(parents=True, exist_ok=True)
    save_features(source, out / "source.csv")
    save_features(target, out / "target.csv", labels=False)
    payload = oracle.to_dict()
    payload.update(scenario=scenario.lower(), seed=seed, n_classes=spec.n_classes)
    _write_json(out / "oracle.json", payload)
    click.echo(f"wrote {out}/source.csv, target.csv, oracle.json "
               f"(l1 prior distance {oracle.l1_distance:.4f})")


TRAIN_KEYS = ("source", "target", "oracle", "scenario", "n", "out", "seed", "lambda_tu",
              "lambda_du", "eps", "eps_alpha", "tau", "lr", "t_pre", "t_adapt", "hidden",
              "z_dim", "kz", "ky", "ky_bandwidth", "path", "tu_pseudo")


def _load_data(values):
    """Source, target and optional oracle dict from files or a named scenario."""
    if values["scenario"]:
        spec = make_scenario(values["scenario"], seed=values["seed"], n=values["n"])
        source, target, oracle = synth_gls(spec)
        return source, target.unlabeled(), oracle.to_dict()
    if not values["source"] or not values["target"]:
        raise click.UsageError("give --source and --target, or --scenario")
    for key in ("source", "target", "oracle"):
        if values[key] and not Path(values[key]).exists():
            raise click.UsageError(f"no such file: {values[key]}")
    oracle = None
    if values["oracle"]:
        oracle = json.loads(Path(values["oracle"]).read_text(encoding="utf-8"))
    source = load_features(values["source"])
    n_classes = oracle["n_classes"] if oracle and "n_classes" in oracle else source.n_classes
    source = FeatureSet(source.features, source.labels, n_classes)
    # target labels are never read for training
    target = load_features(values["target"]).unlabeled()
    return source, target, oracle


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--source", type=click.Path(dir_okay=False), help="Labeled source CSV.")
@click.option("--target", type=click.Path(dir_okay=False), help="Target CSV (labels ignored).")
@click.option("--oracle", type=click.Path(dir_okay=False), help="oracle.json for evaluation.")
@click.option("--scenario", default=None, help="Generate data from a named scenario instead.")
@click.option("--n", default=None, type=int)
@click.option("--out", type=click.Path(file_okay=False), default="run", show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--lambda-tu", type=float, default=TrainConfig.lambda_tu, show_default=True)
@click.option("--lambda-du", type=float, default=TrainConfig.lambda_du, show_default=True)
@click.option("--eps", type=float, default=TrainConfig.eps, show_default=True)
@click.option("--eps-alpha", type=float, default=None, help="Use eps = m**-alpha instead.")
@click.option("--tau", type=float, default=TrainConfig.tau, show_default=True)
@click.option("--lr", type=float, default=TrainConfig.lr, show_default=True)
@click.option("--t-pre", type=int, default=TrainConfig.t_pre, show_default=True)
@click.option("--t-adapt", type=int, default=TrainConfig.t_adapt, show_default=True)
@click.option("--hidden", default=",".join(map(str, TrainConfig.hidden)), show_default=True,
              help="Comma-separated hidden widths of G.")
@click.option("--z-dim", type=int, default=TrainConfig.z_dim, show_default=True)
@click.option("--kz", type=click.Choice(["gaussian", "laplacian", "linear"]), default="gaussian",
              show_default=True)
@click.option("--ky", type=click.Choice(["gaussian", "linear"]), default="gaussian",
              show_default=True)
@click.option("--ky-bandwidth", type=float, default=1.0, show_default=True)
@click.option("--path", type=click.Choice(["woodbury", "naive"]), default="woodbury",
              show_default=True)
@click.option("--tu-pseudo", type=click.Choice(["confident", "argmax"]),
              default=TrainConfig.tu_pseudo, show_default=True)
@click.pass_context
def train(ctx, config_path, **_):
    """Pre-train on the source, adapt to the target, write checkpoint/trace/report."""
    values = _merge_config(ctx, config_path, TRAIN_KEYS)
    try:
        cfg = TrainConfig(
            lambda_tu=values["lambda_tu"], lambda_du=values["lambda_du"], eps=values["eps"],
            eps_alpha=values["eps_alpha"], tau=values["tau"], lr=values["lr"],
            t_pre=values["t_pre"], t_adapt=values["t_adapt"], seed=values["seed"],
            hidden=tuple(_int_list(values["hidden"])), z_dim=values["z_dim"],
            kz_family=values["kz"], ky=KernelSpec(values["ky"], values["ky_bandwidth"]),
            path=values["path"], tu_pseudo=values["tu_pseudo"])
        source, target, oracle = _load_data(values)
    except ValueError as exc:
        raise click.UsageError(str(exc))
    if not source.is_labeled:
        raise click.UsageError("the source file must be fully labeled")
    out = Path(values["out"])
    out.mkdir(parents=True, exist_ok=True)
    target_labels = np.asarray(oracle["target_labels"]) if oracle else None

    params = MulParams.init(cfg.widths(source.dim), source.n_classes, cfg.seed)
    trace = TrainTrace()
    pre_acc = None
    try:
        params, _ = pretrain(params, source, cfg, target_labels=target_labels, target=target,
                             trace=trace)
        if target_labels is not None:
            pre_acc = accuracy(predict(params, target.features), target_labels)
        params, _, _ = adapt(params, source, target, cfg, target_labels=target_labels,
                             trace=trace)
    except (RuntimeError, ValueError, FloatingPointError) as exc:
        trace.write_csv(out / "trace.csv")
        click.echo(f"training failed after {len(trace)} epochs: {exc}", err=True)
        sys.exit(1)
    trace.write_csv(out / "trace.csv")
    save_params(params, out / "params.ckpt")

    zs, logits_s = forward(params, source.features)
    zt, logits_t = forward(params, target.features)
    pred_s, pred_t = np.argmax(logits_s, 1), np.argmax(logits_t, 1)
    shift = estimate_shift(pred_s, source.labels, pred_t, source.n_classes)
    metrics = None
    if oracle:
        metrics = metrics_report(zt, pred_t, target_labels, zs, source.labels, shift.p_t,
                                 np.asarray(oracle["prior_t"]), source.n_classes).to_dict()
    report = {
        "version": REPORT_VERSION,
        "config": cfg.to_dict(),
        "source_accuracy": accuracy(pred_s, source.labels),
        "pretrain_target_accuracy": pre_acc,
        "metrics": metrics,
        "shift": shift.to_dict(),
    }
    assert tuple(sorted(report)) == tuple(sorted(REPORT_FIELDS))
    _write_json(out / "report.json", report)
    summary = f"wrote {out}/params.ckpt, trace.csv, report.json"
    if metrics:
        summary += f" (target accuracy {pre_acc:.4f} -> {metrics['accuracy']:.4f})"
    click.echo(summary)


@main.command("estimate-shift")
@click.option("--checkpoint", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--source", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--target", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", required=True, type=click.Path(dir_okay=False))
def estimate_shift_cmd(checkpoint, source, target, out):
    """Estimate importance weights and the target prior with a trained model."""
    try:
        params = load_params(checkpoint)
    except (OSError, ValueError) as exc:
        click.echo(f"cannot read checkpoint {checkpoint}: {exc}", err=True)
        sys.exit(1)
    try:
        src = load_features(source)
        tgt = load_features(target)
    except ValueError as exc:
        raise click.UsageError(str(exc))
    if not src.is_labeled:
        raise click.UsageError(f"{source} must be fully labeled")
    c = params.weights[-1].shape[1]
    try:
        shift = estimate_shift(predict(params, src.features), src.labels,
                               predict(params, tgt.features), c)
    except (RuntimeError, ValueError) as exc:
        click.echo(f"shift estimation failed: {exc}", err=True)
        sys.exit(1)
    _write_json(out, {"version": REPORT_VERSION, **shift.to_dict()})
    click.echo(f"wrote {out}; target prior {np.round(shift.p_t, 4).tolist()}")


BENCH_FIELDS = ("path", "m", "r", "seed", "seconds", "max_abs_err")


def _bench_sample(m, d, c, seed):
    rng = make_rng(seed)
    labels = np.arange(m) % c
    means = 3.0 * rng.standard_normal((c, d))
    z = means[labels] + rng.standard_normal((m, d))
    return FeatureSet(z, labels, c)


def loglog_slope(ms, seconds) -> float:
    return float(np.polyfit(np.log(ms), np.log(seconds), 1)[0])


def run_bench(sizes, ranks, seeds, d=8, c=3, eps=1e-3, repeats=1):
    """Time the three MCMD paths; returns a list of row dicts."""
    rows = []
    ky = KernelSpec("gaussian", 1.0)

    def timed(fn):
        best, result = np.inf, None
        for _ in range(repeats):
            t0 = time.perf_counter()
            result = fn()
            best = min(best, time.perf_counter() - t0)
        return best, result

    for m in sizes:
        data = _bench_sample(m, d, c, seed=m)
        kz = KernelSpec("gaussian", median_bandwidth(data.features[: min(m, 1000)]))

        def run(path, proj=None):
            # fitting (and the dense Gram) is part of the measured cost
            op = fit_cme(data, kz, ky, eps)
            return mcmd_matrix_within(op, path=path, rff=proj)

        t_naive, ref = timed(lambda: run("naive"))
        rows.append(dict(path="naive", m=m, r="", seed="", seconds=t_naive, max_abs_err=0.0))
        t_wb, val = timed(lambda: run("woodbury"))
        rows.append(dict(path="woodbury", m=m, r="", seed="", seconds=t_wb,
                         max_abs_err=float(np.max(np.abs(val - ref)))))
        for r in ranks:
            for seed in range(seeds):
                proj = rff_build(d, r, kz.bandwidth, seed)
                t_rff, val = timed(lambda: run("rff", proj))
                rows.append(dict(path="rff", m=m, r=r, seed=seed, seconds=t_rff,
                                 max_abs_err=float(np.max(np.abs(val - ref)))))
    return rows


@main.command()
@click.option("--sizes", default="500,1000,2000,4000", show_default=True)
@click.option("--ranks", default="128,512,2048", show_default=True)
@click.option("--seeds", default=5, show_default=True, type=int)
@click.option("--dim", default=8, show_default=True, type=int)
@click.option("--classes", default=3, show_default=True, type=int)
@click.option("--repeats", default=1, show_default=True, type=int)
@click.option("--out", required=True, type=click.Path(dir_okay=False))
def bench(sizes, ranks, seeds, dim, classes, repeats, out):
    """Time naive vs Woodbury vs random-feature MCMD over a grid of sample sizes."""
    sizes, ranks = _int_list(sizes), _int_list(ranks)
    rows = run_bench(sizes, ranks, seeds, d=dim, c=classes, repeats=repeats)
    with open(out, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=BENCH_FIELDS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    for path in ("naive", "woodbury"):
        sel = [r for r in rows if r["path"] == path]
        if len(sel) > 1:
            slope = loglog_slope([r["m"] for r in sel], [r["seconds"] for r in sel])
            click.echo(f"{path}: log-log slope {slope:.2f}")
    click.echo(f"wrote {out}")


if __name__ == "__main__":
    main()
