"""Experiment runners behind ``lhuc run``.

Each runner writes into a staging directory that replaces the output
directory only when the run succeeds, so a failed run never leaves partial
results behind. Outputs: ``resolved_config.json``, ``metrics.jsonl``, CSV
plot tables and, for runs that train, checkpoints.
"""

from __future__ import annotations

import logging
import shutil
from dataclasses import replace
from pathlib import Path

import numpy as np
import yaml

from . import io
from .adapter import (
    AdaptConfig,
    adapt,
    evaluate,
    factorised_experiment,
    one_shot_apply,
    predict_outputs,
    two_pass_adapt,
)
from .config import ConfigError, ExperimentConfig, config_hash, dump_config, from_dict
from .gradcheck import gradcheck
from .model import NetworkParams, TransformBank
from .synth import (
    BumpSpec,
    ClusterTaskSpec,
    FrameDataset,
    MixtureBumpSpec,
    gen_bump,
    gen_mixture_bump,
    gen_multicluster,
    gen_session,
    oracle_predict,
)
from .trainer import SatConfig, TrainConfig, train_sat, train_si

__all__ = [
    "RunContext",
    "run_experiment",
    "spread_network",
    "per_speaker_two_pass",
    "bump_sat_comparison",
    "materialize",
]

log = logging.getLogger(__name__)


class RunContext:
    """Collects metric records, tables and checkpoints for one run."""

    def __init__(self, cfg: ExperimentConfig, directory: Path):
        self.cfg = cfg
        self.dir = directory
        self.records: list[io.MetricRecord] = []
        self.tables: dict[str, tuple[list[str], list[list]]] = {}

    def metric(self, step: int, name: str, value, cluster=None):
        self.records.append(io.MetricRecord(self.cfg.experiment, step, name, None if value is None else float(value), cluster))

    def table(self, name: str, header, rows):
        rows = [list(r) for r in rows]
        self.tables[name] = (list(header), rows)
        io.write_table(self.dir / name, header, rows)

    def checkpoint(self, name: str, params: NetworkParams, bank: TransformBank | None = None, epoch: int = 0, kind=None):
        meta = {"config_hash": config_hash(self.cfg), "epoch": int(epoch), "experiment": self.cfg.experiment,
                "seed": int(self.cfg.seed)}
        io.save_checkpoint(self.dir / name, io.Checkpoint(params, bank, kind, meta))

    def finish(self):
        io.emit_metrics(self.dir / "metrics.jsonl", self.records)


# --------------------------------------------------------------------------
# shared pieces


def _topology(cfg: ExperimentConfig, data: FrameDataset) -> list[int]:
    return [data.dim, *[int(h) for h in cfg.network.hidden_sizes], data.n_classes]


def _si_model(ctx: RunContext, train: FrameDataset, save: bool = True) -> NetworkParams:
    cfg = ctx.cfg
    if cfg.options.checkpoint:
        ckpt = io.load_checkpoint(cfg.options.checkpoint)
        if ckpt.params.n_inputs != train.dim or ckpt.params.n_outputs != train.n_classes:
            raise ConfigError("options.checkpoint", "checkpoint topology does not match the task")
        return ckpt.params
    p0 = NetworkParams.initialize(_topology(cfg, train), seed=cfg.seed)
    params, curve = train_si(train, p0, cfg.train, callback=lambda r: _curve_metrics(ctx, "si", r))
    if save:
        ctx.checkpoint("si.ckpt", params, epoch=len(curve))
    return params


def _curve_metrics(ctx: RunContext, prefix: str, rec):
    ctx.metric(rec.epoch, f"{prefix}_train_loss", rec.train_loss)
    ctx.metric(rec.epoch, f"{prefix}_cv_loss", rec.cv_loss)
    ctx.metric(rec.epoch, f"{prefix}_lr", rec.lr)


def _curve_rows(curve):
    return [[r.epoch, r.lr, r.train_loss, r.cv_loss, r.decision] for r in curve]


def _speakers(cfg: ExperimentConfig, test: FrameDataset) -> list[int]:
    ids = test.speaker_ids()
    return ids if cfg.options.n_speakers is None else ids[: cfg.options.n_speakers]


def per_speaker_two_pass(params, model, test: FrameDataset, speakers, cfg: AdaptConfig, label_corruption=0.0,
                         fraction: float = 1.0):
    """``[(speaker, unadapted FER, adapted FER)]`` for a two-pass run per speaker.

    ``fraction`` keeps only the first part of each speaker's frames for
    estimating the transform; evaluation always uses all of them.
    """
    out = []
    for s in speakers:
        d = test.where(speaker=s)
        part = d.subset(np.arange(max(1, int(np.ceil(fraction * len(d)))))) if fraction < 1.0 else None
        base = evaluate(params, model, d).frame_error_rate
        _, m = two_pass_adapt(params, model, d, cfg, label_corruption=label_corruption, seed=s, adaptation_set=part)
        out.append((s, base, m.frame_error_rate))
    return out


def _mean(rows, col):
    return float(np.mean([r[col] for r in rows]))


# --------------------------------------------------------------------------
# experiments


def _train_si(ctx: RunContext):
    cfg = ctx.cfg
    train, test = gen_multicluster(cfg.task)
    p0 = NetworkParams.initialize(_topology(cfg, train), seed=cfg.seed)
    params, curve = train_si(train, p0, cfg.train, callback=lambda r: _curve_metrics(ctx, "si", r))
    ctx.checkpoint("si.ckpt", params, epoch=len(curve))
    ctx.table("training_curve.csv", ["epoch", "lr", "train_loss", "cv_loss", "decision"], _curve_rows(curve))
    m = evaluate(params, None, test)
    ctx.metric(len(curve), "test_fer", m.frame_error_rate)
    ctx.metric(len(curve), "oracle_fer", float(np.mean(oracle_predict(cfg.task, test) != test.labels)))
    for s, v in m.per_cluster.items():
        ctx.metric(len(curve), "test_fer", v["fer"], cluster=s)


def _train_sat(ctx: RunContext):
    cfg = ctx.cfg
    train, test = gen_multicluster(cfg.task)
    p0 = NetworkParams.initialize(_topology(cfg, train), seed=cfg.seed)
    params, bank, curve = train_sat(train, p0, cfg.train, cfg.sat, kind=cfg.adapt.kind,
                                    callback=lambda r: _curve_metrics(ctx, "sat", r))
    ctx.checkpoint("sat.ckpt", params, bank, epoch=len(curve))
    ctx.table("training_curve.csv", ["epoch", "lr", "train_loss", "cv_loss", "decision"], _curve_rows(curve))
    ctx.metric(len(curve), "si_mode_test_fer", evaluate(params, bank, test).frame_error_rate)
    rows = per_speaker_two_pass(params, bank, test, _speakers(cfg, test), cfg.adapt)
    for s, base, adapted in rows:
        ctx.metric(len(curve), "adapted_fer", adapted, cluster=s)
    ctx.metric(len(curve), "adapted_fer", _mean(rows, 2))
    ctx.table("per_speaker.csv", ["speaker", "unadapted_fer", "adapted_fer", "delta"],
              [[s, b, a, a - b] for s, b, a in rows])


def _adapt(ctx: RunContext):
    """Sweeps over adapted layers, sweeps, re-parametrisation, data amount and target quality."""
    cfg, opt = ctx.cfg, ctx.cfg.options
    train, test = gen_multicluster(cfg.task)
    params = _si_model(ctx, train)
    speakers = _speakers(cfg, test)
    n_hidden = len(params.hidden_sizes)
    base = float(np.mean([evaluate(params, None, test.where(speaker=s)).frame_error_rate for s in speakers]))
    ctx.metric(0, "unadapted_fer", base)

    rows = [[0, base]]
    for k in range(1, n_hidden + 1):
        a = replace(cfg.adapt, layers_enabled=[i < k for i in range(n_hidden)])
        fer = _mean(per_speaker_two_pass(params, None, test, speakers, a), 2)
        rows.append([k, fer])
        ctx.metric(k, "fer_by_layers", fer)
    ctx.table("adapt_layers.csv", ["layers_adapted", "fer"], rows)

    rows = []
    for sw in opt.sweep_values:
        fer = _mean(per_speaker_two_pass(params, None, test, speakers, replace(cfg.adapt, sweeps=int(sw))), 2)
        rows.append([int(sw), fer])
        ctx.metric(int(sw), "fer_by_sweeps", fer)
    ctx.table("adapt_sweeps.csv", ["sweeps", "fer"], rows)

    rows = []
    for i, kind in enumerate(opt.reparam_kinds):
        fer = _mean(per_speaker_two_pass(params, None, test, speakers, replace(cfg.adapt, kind=kind)), 2)
        rows.append([kind, fer])
        ctx.metric(i, f"fer_reparam_{kind}", fer)
    ctx.table("adapt_reparam.csv", ["kind", "fer"], rows)

    rows = []
    for i, frac in enumerate(opt.data_fractions):
        fer = _mean(per_speaker_two_pass(params, None, test, speakers, cfg.adapt, fraction=frac), 2)
        rows.append([frac, fer])
        ctx.metric(i, "fer_by_data_fraction", fer)
    ctx.table("adapt_data_amount.csv", ["fraction", "fer"], rows)

    rows = []
    for i, rate in enumerate(opt.corruption_rates):
        fer = _mean(per_speaker_two_pass(params, None, test, speakers, cfg.adapt, label_corruption=rate), 2)
        rows.append([rate, fer])
        ctx.metric(i, "fer_by_corruption", fer)
    sup = _mean(per_speaker_two_pass(params, None, test, speakers, replace(cfg.adapt, supervised=True)), 2)
    ctx.metric(0, "supervised_fer", sup)
    ctx.table("adapt_target_quality.csv", ["corruption_rate", "fer"], rows)


def _two_pass(ctx: RunContext):
    cfg = ctx.cfg
    train, test = gen_multicluster(cfg.task)
    params = _si_model(ctx, train)
    rows = per_speaker_two_pass(params, None, test, _speakers(cfg, test), cfg.adapt)
    for s, base, adapted in rows:
        ctx.metric(0, "unadapted_fer", base, cluster=s)
    for s, base, adapted in rows:
        ctx.metric(0, "adapted_fer", adapted, cluster=s)
    ctx.metric(0, "adapted_fer", _mean(rows, 2))
    ctx.metric(0, "unadapted_fer", _mean(rows, 1))
    ctx.metric(0, "speakers_improved", sum(a <= b for _, b, a in rows))
    ctx.table("per_speaker.csv", ["speaker", "unadapted_fer", "adapted_fer", "delta"],
              [[s, b, a, a - b] for s, b, a in rows])


def _one_shot(ctx: RunContext):
    cfg = ctx.cfg
    train, test = gen_multicluster(cfg.task)
    params = _si_model(ctx, train)
    speakers = test.speaker_ids()[: cfg.options.n_speakers or 10]
    session_b = gen_session(cfg.task, 1, speakers)
    rows = []
    for s in speakers:
        t_a, _ = two_pass_adapt(params, None, test.where(speaker=s), cfg.adapt)
        b = session_b.where(speaker=s)
        rows.append([s, evaluate(params, None, b).frame_error_rate,
                     one_shot_apply(params, t_a, b).frame_error_rate,
                     two_pass_adapt(params, None, b, cfg.adapt)[1].frame_error_rate])
    for s, base, one, two in rows:
        ctx.metric(0, "one_shot_fer", one, cluster=s)
        ctx.metric(0, "two_pass_fer", two, cluster=s)
    ctx.metric(0, "one_shot_fer", _mean(rows, 2))
    ctx.metric(0, "two_pass_fer", _mean(rows, 3))
    ctx.metric(0, "mean_abs_difference", float(np.mean([abs(r[2] - r[3]) for r in rows])))
    ctx.table("one_shot.csv", ["speaker", "unadapted_fer", "one_shot_fer", "two_pass_fer"], rows)


def _factorised(ctx: RunContext):
    cfg = ctx.cfg
    train, test = gen_multicluster(cfg.task)
    params = _si_model(ctx, train)
    speakers = _speakers(cfg, test)
    rep = factorised_experiment(params, test, cfg.options.alphas, cfg.adapt, speakers)
    rows = [["unadapted", None, rep.unadapted.frame_error_rate],
            ["speaker", None, rep.speaker.frame_error_rate],
            ["environment", None, rep.environment.frame_error_rate],
            ["joint", None, rep.joint.frame_error_rate]]
    rows += [["interpolated", a, m.frame_error_rate] for a, m in rep.interpolated.items()]
    for i, (cond, alpha, fer) in enumerate(rows):
        ctx.metric(i, f"fer_{cond}" if alpha is None else f"fer_interpolated_{alpha:g}", fer)
    ctx.table("factorised.csv", ["condition", "alpha", "fer"], rows)


def spread_network(units: int, x_range, seed, output_kind: str = "linear_regressor") -> NetworkParams:
    """1-input, 1-output network whose sigmoid steps start evenly spaced over ``x_range``.

    Only the hidden layer's placement is fixed; output weights stay random.
    Without this a 4-unit net usually stalls on the flat mean-prediction
    plateau long enough for newbob to stop it.
    """
    lo, hi = float(x_range[0]), float(x_range[1])
    p = NetworkParams.initialize([1, units, 1], output_kind, seed=seed)
    edges = np.linspace(lo, hi, units + 2)[1:-1]
    slope = 4.0 * (units + 1) / (hi - lo)
    p.weights[0][:, 0] = slope
    p.biases[0][:] = -slope * edges
    return p


def bump_sat_comparison(spec: MixtureBumpSpec, seed: int, units: int, train_cfg: TrainConfig,
                        adapt_cfg: AdaptConfig, gamma: float = 0.5):
    """Per-mode adapted MSE of an SI-trained and a SAT-trained net on the mixture.

    Returns ``(si_mse, sat_mse, si_params, sat_params, transforms)`` where
    ``transforms`` maps ``(model, mode)`` to the adapted transform.
    """
    mix = gen_mixture_bump(spec)
    tc = replace(train_cfg, seed=seed)
    p0 = spread_network(units, spec.x_range, seed)
    si, _ = train_si(mix, p0, tc)
    sat, _, _ = train_sat(mix, p0, tc, SatConfig(gamma=gamma, seed=seed), kind=adapt_cfg.kind)
    transforms, losses = {}, {"si": [], "sat": []}
    for name, params in (("si", si), ("sat", sat)):
        for mode in mix.speaker_ids():
            d = mix.where(speaker=mode)
            t = adapt(params, d, d.labels, adapt_cfg)
            transforms[name, mode] = t
            losses[name].append(evaluate(params, t, d).mean_loss)
    return float(np.mean(losses["si"])), float(np.mean(losses["sat"])), si, sat, transforms


def _bump_demo(ctx: RunContext):
    cfg = ctx.cfg
    units = cfg.options.bump_units
    acfg = replace(cfg.bump_adapt, supervised=True)
    f1, f2 = gen_bump(cfg.bump)
    p0 = spread_network(units, cfg.bump.x_range, cfg.seed)
    params, curve = train_si(f1, p0, replace(cfg.bump_train, seed=cfg.seed))
    ctx.checkpoint("bump_si.ckpt", params, epoch=len(curve))
    t = adapt(params, f2, f2.labels, acfg)
    fit = evaluate(params, None, f1).mean_loss
    before = evaluate(params, None, f2).mean_loss
    after = evaluate(params, t, f2).mean_loss
    ctx.metric(0, "f1_fit_mse", fit)
    ctx.metric(0, "f2_unadapted_mse", before)
    ctx.metric(0, "f2_adapted_mse", after)
    order = np.argsort(f2.features[:, 0], kind="stable")
    x = f2.features[order]
    ctx.table("bump_fit.csv", ["x", "target", "si_prediction", "adapted_prediction"],
              zip(x[:, 0], f2.labels[order, 0], predict_outputs(params, None, x)[:, 0],
                  predict_outputs(params, t, x)[:, 0]))
    ctx.table("bump_scales.csv", ["unit", "scale"], enumerate(t.scales()[0]))

    rows = []
    for seed in cfg.options.bump_seeds:
        si_mse, sat_mse, *_ = bump_sat_comparison(cfg.mixture, int(seed), units, cfg.bump_train, acfg,
                                                  cfg.sat.gamma)
        rows.append([int(seed), si_mse, sat_mse])
        ctx.metric(int(seed), "mixture_si_adapted_mse", si_mse)
        ctx.metric(int(seed), "mixture_sat_adapted_mse", sat_mse)
    ctx.metric(0, "mixture_sat_wins", sum(r[2] < r[1] for r in rows))
    ctx.table("bump_sat.csv", ["seed", "si_adapted_mse", "sat_adapted_mse"], rows)


def _gradcheck(ctx: RunContext):
    rep = gradcheck(ctx.cfg.options.gradcheck_cases, seed=ctx.cfg.seed)
    for i, (group, err) in enumerate(sorted(rep.max_error.items())):
        ctx.metric(i, f"max_rel_error_{group}", err)
    ctx.metric(0, "max_rel_error", rep.overall)
    ctx.table("gradcheck.csv", ["group", "max_rel_error", "worst_case"],
              [[g, e, rep.worst_case[g]] for g, e in sorted(rep.max_error.items())])


_RUNNERS = {
    "train_si": _train_si,
    "train_sat": _train_sat,
    "adapt": _adapt,
    "two_pass": _two_pass,
    "one_shot": _one_shot,
    "factorised": _factorised,
    "bump_demo": _bump_demo,
    "gradcheck": _gradcheck,
}


def run_experiment(cfg: ExperimentConfig, output_dir=None) -> RunContext:
    """Validate ``cfg``, run it, and move the results into place atomically."""
    cfg.validate()
    out = Path(output_dir if output_dir is not None else cfg.output_dir)
    staging = out.with_name(out.name + ".partial")
    if staging.exists():
        shutil.rmtree(staging)
    staging.mkdir(parents=True)
    ctx = RunContext(cfg, staging)
    try:
        (staging / "resolved_config.json").write_text(dump_config(cfg), encoding="utf-8")
        log.info("running %s into %s", cfg.experiment, out)
        _RUNNERS[cfg.experiment](ctx)
        ctx.finish()
    except BaseException:
        shutil.rmtree(staging, ignore_errors=True)
        raise
    if out.exists():
        shutil.rmtree(out)
    staging.rename(out)
    ctx.dir = out
    return ctx


# --------------------------------------------------------------------------
# dataset materialisation


_TASKS = {"multicluster": ClusterTaskSpec, "bump": BumpSpec, "mixture_bump": MixtureBumpSpec}


def materialize(spec_path, out_dir) -> list[Path]:
    """Generate the datasets described by a spec file and save them.

    The spec file holds ``task`` (``multicluster``, ``bump`` or
    ``mixture_bump``) and an optional ``spec`` mapping of generator fields.
    """
    data = yaml.safe_load(Path(spec_path).read_text(encoding="utf-8")) or {}
    if not isinstance(data, dict):
        raise ConfigError("", "synth spec must be a mapping")
    unknown = set(data) - {"task", "spec"}
    if unknown:
        raise ConfigError(sorted(unknown)[0], "unknown configuration key")
    task = data.get("task")
    if task not in _TASKS:
        raise ConfigError("task", f"expected one of {sorted(_TASKS)}, got {task!r}")
    spec = from_dict(_TASKS[task], data.get("spec"), "spec")
    if hasattr(spec, "validate"):
        try:
            spec.validate()
        except ValueError as exc:
            raise ConfigError("spec", str(exc)) from None
    if task == "multicluster":
        parts = dict(zip(("train", "test"), gen_multicluster(spec)))
    elif task == "bump":
        parts = dict(zip(("f1", "f2"), gen_bump(spec)))
    else:
        parts = {"mixture": gen_mixture_bump(spec)}
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for name, ds in parts.items():
        path = out / f"{name}.lhds"
        io.save_dataset(path, ds)
        written.append(path)
    return written
