"""Command-line entry point (``nsebm``).

Subcommands
-----------
ground    parse + ground a model/data pair, write the ground-model dump
infer     MAP inference; TSV of target atoms, value + duality gap in manifest
learn     train neural/symbolic parameters with one of the four algorithms
eval      score predictions (or run inference first) against a task bundle
gen-data  write a generated task bundle directory
check     engine-vs-oracle invariant suites; exit 0 iff all pass

Configuration
-------------
Every subcommand accepts ``--config FILE`` with line-oriented ``key = value``
pairs (``#`` or ``//`` comments).  Precedence: command-line flags > config
file > built-in defaults.  Unknown config keys are rejected.

Exit codes: 0 success, 1 usage/input error, 2 infeasible hard constraints,
3 solver or learning failure.  Errors go to standard error.

Outputs are deterministic given identical inputs, seed, and single-worker
mode; numeric TSV cells use 9 significant digits.  Output directories use
manifest.tsv / predictions.tsv / train_log.tsv / checkpoint.mlp /
weights.tsv as applicable; every manifest records the seed.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys
from types import SimpleNamespace

import numpy as np

from . import __version__, grounding, lang, neural, oracle, tasks
from .energy import phi_vector
from .gradients import fd_check
from .lcqp import (
    EPSILON,
    GAP_TOL,
    InfeasibleModel,
    SolverFailure,
    assemble,
    prox_point,
    round_discrete,
    solve,
)
from .learning import (
    LearningFailure,
    LossConfig,
    PolicyConfig,
    TrainLog,
    _group_g,
    enumerated_policy_gradient,
    group_samples,
    learn_bilevel,
    learn_modular,
    learn_policy,
    learn_value_gd,
    sampled_policy_gradient,
)
from .oracle import OracleReport

EXIT_USAGE = 1
EXIT_INFEASIBLE = 2
EXIT_FAILURE = 3


class CliError(Exception):
    """Usage or input error; maps to exit code 1."""


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return "%.9g" % v
    return str(v)


def _write_tsv(path, rows):
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write("\t".join(_fmt(c) for c in row) + "\n")


def _write_manifest(outdir, kv):
    _write_tsv(os.path.join(outdir, "manifest.tsv"),
               [(k, _fmt(kv[k])) for k in sorted(kv)])


def _read_text(path, what):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return fh.read()
    except OSError as exc:
        raise CliError(f"cannot read {what} {path!r}: {exc}") from exc


# ---------------------------------------------------------------------------
# configuration


def _parse_config_file(path):
    pairs = []
    for lineno, line in enumerate(_read_text(path, "config file").splitlines(), 1):
        cut = min((i for i in (line.find("#"), line.find("//")) if i >= 0),
                  default=len(line))
        line = line[:cut].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError(f"{path}:{lineno}: expected 'key = value'")
        key, _, val = line.partition("=")
        pairs.append((lineno, key.strip(), val.strip()))
    return pairs


def _convert(raw, default, key, where):
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError("not a boolean")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw
    except ValueError as exc:
        raise CliError(f"{where}: bad value for {key!r}: {raw!r}") from exc


def _merge(args, defaults):
    """Apply precedence flags > config file > defaults.

    Returns (namespace, set of user-set keys).
    """
    cfg = dict(defaults)
    user = set()
    path = getattr(args, "config", None)
    if path:
        for lineno, key, raw in _parse_config_file(path):
            k = key.replace("-", "_")
            if k not in defaults:
                raise CliError(f"{path}:{lineno}: unknown config key {key!r}")
            cfg[k] = _convert(raw, defaults[k], key, f"{path}:{lineno}")
            user.add(k)
    for k in defaults:
        v = getattr(args, k, None)
        if v is not None:
            cfg[k] = v
            user.add(k)
    return SimpleNamespace(**cfg), user


def _need(cfg, *keys):
    for k in keys:
        if not getattr(cfg, k):
            raise CliError(f"missing required option --{k.replace('_', '-')}")


def _outdir(cfg):
    os.makedirs(cfg.out, exist_ok=True)
    return cfg.out


# ---------------------------------------------------------------------------
# model/data plumbing shared by ground/infer/learn/eval


def _load_model(cfg):
    program = lang.parse_program(_read_text(cfg.model, "model file"))
    dmap = lang.parse_data_map(_read_text(cfg.data, "data map"))
    base = cfg.base_dir or os.path.dirname(os.path.abspath(cfg.data))
    tables = grounding.load_data(program, dmap, base_dir=base)
    return program, grounding.ground(program, tables)


def _strip_bindings(samples):
    for s in samples:
        s.binding = None
        s.nn_labels = None
        s.nn_mask = None
    return samples


def _samples_from_truth(program, model, tag=""):
    """Training samples whose labels/head targets come from truth rows."""
    labels = {}
    for atom, v in model.truth.items():
        if program.predicates[atom[0]].kind == "target":
            labels[atom] = v
    nn_targets = {}
    for blk in model.g_blocks:
        for key, s0 in zip(blk.group_keys, blk.group_start):
            vals = [model.truth.get(a)
                    for a in model.g_atoms[s0:s0 + blk.width]]
            if all(v is not None for v in vals):
                nn_targets[(blk.pred, key)] = np.array(vals, dtype=float)
    samples, _ = tasks.make_samples(model, labels, nn_targets, tag=tag)
    return samples


def _atom_row(atom, value):
    return (atom[0], *atom[1], value)


def _parse_predictions(path):
    preds = {}
    for lineno, line in enumerate(_read_text(path, "predictions").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) < 2:
            raise CliError(f"{path}:{lineno}: expected pred\\targs...\\tvalue")
        try:
            preds[(parts[0], tuple(parts[1:-1]))] = float(parts[-1])
        except ValueError as exc:
            raise CliError(f"{path}:{lineno}: bad value {parts[-1]!r}") from exc
    return preds


def _read_weights(path, r):
    w = None
    for lineno, line in enumerate(_read_text(path, "weights").splitlines(), 1):
        if not line.strip():
            continue
        rid, _, val = line.partition("\t")
        if w is None:
            w = np.zeros(r)
        try:
            w[int(rid)] = float(val)
        except (ValueError, IndexError) as exc:
            raise CliError(f"{path}:{lineno}: bad weight row") from exc
    if w is None:
        raise CliError(f"{path}: no weight rows")
    return w


def _save_weights(path, w):
    _write_tsv(path, [(i, float(v)) for i, v in enumerate(w)])


# ---------------------------------------------------------------------------
# ground


GROUND_DEFAULTS = {"model": "", "data": "", "base_dir": "", "out": "",
                   "seed": 0, "workers": 1}


def cmd_ground(cfg, user):
    _need(cfg, "model", "data", "out")
    _, model = _load_model(cfg)
    out = _outdir(cfg)
    with open(os.path.join(out, "ground.tsv"), "w", encoding="utf-8") as fh:
        fh.write(grounding.dump_model(model))
    q_rows = sum(2 if c.equality else 1 for c in model.constraints)
    _write_manifest(out, {
        "command": "ground", "model": cfg.model, "data": cfg.data,
        "seed": cfg.seed, "workers": cfg.workers,
        "n_targets": model.n_y, "n_observed": model.n_x,
        "n_neural": model.n_g, "n_potentials": len(model.potentials),
        "n_constraint_rows": q_rows, "n_rules": model.r,
    })
    print(f"ground: {model.n_y} targets, {len(model.potentials)} potentials, "
          f"{q_rows} constraint rows -> {out}")
    return 0


# ---------------------------------------------------------------------------
# infer


INFER_DEFAULTS = {"model": "", "data": "", "base_dir": "", "out": "",
                  "seed": 0, "workers": 1, "epsilon": EPSILON,
                  "gap_tol": GAP_TOL, "discrete": False, "resume": "",
                  "weights": ""}


def cmd_infer(cfg, user):
    _need(cfg, "model", "data", "out")
    _, model = _load_model(cfg)
    mlp = neural.load_mlp(cfg.resume) if cfg.resume else None
    samples, _ = tasks.make_samples(model, {}, None)
    if mlp is None:
        _strip_bindings(samples)
    w = (_read_weights(cfg.weights, model.r) if cfg.weights
         else model.weights)
    groups = group_samples(samples, cfg.epsilon)
    predictions = []
    total_v, max_gap = 0.0, 0.0
    for grp in groups:
        g, _ = _group_g(grp, mlp)
        lq = grp.lcqp_full
        res = solve(lq, w, x=grp.x, g=g if grp.n_g else None,
                    gap_tol=cfg.gap_tol)
        y_full = res.y_full.copy()
        if cfg.discrete:
            y01 = round_discrete(grp.samples[0].model, w=w,
                                 epsilon=cfg.epsilon, x=grp.x,
                                 g=g if grp.n_g else None, lcqp=lq,
                                 gap_tol=cfg.gap_tol)
            y_full[:, lq.free_y] = y01
        total_v += float(res.value.sum())
        max_gap = max(max_gap, float(res.gap.max()))
        for b, s in enumerate(grp.samples):
            for li, atom in enumerate(s.model.y_atoms):
                predictions.append(_atom_row(atom, float(y_full[b, li])))
    predictions.sort(key=lambda row: row[:-1])
    out = _outdir(cfg)
    _write_tsv(os.path.join(out, "predictions.tsv"), predictions)
    _write_manifest(out, {
        "command": "infer", "model": cfg.model, "data": cfg.data,
        "seed": cfg.seed, "workers": cfg.workers, "epsilon": cfg.epsilon,
        "gap_tol": cfg.gap_tol, "discrete": cfg.discrete,
        "value": total_v, "duality_gap": max_gap,
        "components": len(samples),
    })
    print(f"infer: {len(predictions)} atoms, value {_fmt(total_v)}, "
          f"max gap {_fmt(max_gap)} -> {out}")
    return 0


# ---------------------------------------------------------------------------
# learn


LEARN_DEFAULTS = {
    "task_dir": "", "model": "", "data": "", "val_data": "", "base_dir": "",
    "out": "", "seed": 0, "workers": 1, "epsilon": EPSILON,
    "algorithm": "value-gd", "loss": "energy", "neural_loss": "auto",
    "epochs": 100, "lr_neural": 1e-3, "lr_symbolic": 1e-2, "rho": 1.0,
    "samples_n": 4, "hidden": "32", "head": "auto", "freeze_nn": False,
    "resume": "",
}

_ALGORITHMS = ("modular", "value-gd", "bilevel", "policy")
_LOSSES = ("energy", "sp", "mse", "bce")


def _build_mlp(cfg, samples):
    bound = [s for s in samples if s.binding is not None]
    if not bound:
        return None
    if cfg.resume:
        return neural.load_mlp(cfg.resume)
    d_in = bound[0].binding.features.shape[1]
    width = bound[0].binding.width
    head = cfg.head
    if head == "auto":
        head = "softmax" if width > 1 else "sigmoid"
    try:
        hidden = [int(h) for h in cfg.hidden.split(",") if h.strip()]
    except ValueError as exc:
        raise CliError(f"bad --hidden {cfg.hidden!r}") from exc
    return neural.init_mlp([d_in, *hidden, width], head=head,
                           group=width if head == "softmax" else 1,
                           seed=cfg.seed)


def _loss_config(cfg, samples):
    if cfg.algorithm not in _ALGORITHMS:
        raise CliError(f"--algorithm must be one of {', '.join(_ALGORITHMS)}")
    if cfg.loss not in _LOSSES:
        raise CliError(f"--loss must be one of {', '.join(_LOSSES)}")
    if cfg.algorithm == "value-gd" and cfg.loss not in ("energy", "sp"):
        raise CliError("value-gd uses a value-based loss: energy or sp")
    if cfg.algorithm == "bilevel" and cfg.loss not in ("mse", "bce"):
        raise CliError("bilevel uses a minimizer-based loss: mse or bce")
    neural_kind = cfg.neural_loss
    if neural_kind == "auto":
        has_nn = any(s.nn_mask is not None and s.nn_mask.any()
                     for s in samples)
        neural_kind = "bce" if has_nn else "none"
    if neural_kind not in ("none", "mse", "bce"):
        raise CliError("--neural-loss must be auto, none, mse, or bce")
    if cfg.loss in ("energy", "sp"):
        return LossConfig(neural=neural_kind, value=cfg.loss)
    return LossConfig(neural=neural_kind, minimizer=cfg.loss)


def cmd_learn(cfg, user):
    _need(cfg, "out")
    if cfg.task_dir:
        bundle = tasks.load_bundle(cfg.task_dir)
        train, val = bundle.train, bundle.val
        metric = tasks.make_metric(bundle, "val", epsilon=cfg.epsilon)
    else:
        _need(cfg, "model", "data")
        program, model = _load_model(cfg)
        train = _samples_from_truth(program, model, tag="train-")
        val, metric = None, None
        if cfg.val_data:
            vmap = lang.parse_data_map(_read_text(cfg.val_data, "data map"))
            base = cfg.base_dir or os.path.dirname(os.path.abspath(cfg.val_data))
            vtables = grounding.load_data(program, vmap, base_dir=base)
            vmodel = grounding.ground(program, vtables)
            val = _samples_from_truth(program, vmodel, tag="val-")
    if not train:
        raise CliError("no training samples")
    mlp = _build_mlp(cfg, train)
    w0 = train[0].model.weights
    lcfg = _loss_config(cfg, train)
    log = TrainLog()
    common = dict(val=val, epsilon=cfg.epsilon, seed=cfg.seed, log=log)
    if cfg.algorithm == "modular":
        mlp, w, log = learn_modular(
            train, lcfg, mlp, w0, metric=metric, nn_epochs=cfg.epochs,
            lr_nn=cfg.lr_neural, lr_sy=cfg.lr_symbolic, **common)
    elif cfg.algorithm == "value-gd":
        mlp, w, log = learn_value_gd(
            train, lcfg, mlp, w0, epochs=cfg.epochs, lr_nn=cfg.lr_neural,
            lr_sy=cfg.lr_symbolic, freeze_nn=cfg.freeze_nn, **common)
    elif cfg.algorithm == "bilevel":
        mlp, w, log = learn_bilevel(
            train, lcfg, mlp, w0, metric=metric, rho=cfg.rho,
            outer_max=cfg.epochs, freeze_nn=cfg.freeze_nn, **common)
    else:
        policy = PolicyConfig(n_samples=cfg.samples_n)
        mlp, w, log = learn_policy(
            train, lcfg, mlp, w0, policy, epochs=cfg.epochs,
            lr_nn=cfg.lr_neural, lr_sy=cfg.lr_symbolic,
            freeze_nn=cfg.freeze_nn, **common)
    out = _outdir(cfg)
    log.write(os.path.join(out, "train_log.tsv"))
    if mlp is not None:
        neural.save_mlp(mlp, os.path.join(out, "checkpoint.mlp"))
    _save_weights(os.path.join(out, "weights.tsv"), w)
    manifest = {
        "command": "learn", "algorithm": cfg.algorithm, "loss": cfg.loss,
        "neural_loss": lcfg.neural, "seed": cfg.seed, "workers": cfg.workers,
        "epochs": cfg.epochs, "lr_neural": cfg.lr_neural,
        "lr_symbolic": cfg.lr_symbolic, "rho": cfg.rho,
        "samples_n": cfg.samples_n, "epsilon": cfg.epsilon,
        "task_dir": cfg.task_dir, "model": cfg.model, "data": cfg.data,
    }
    if metric is not None:
        manifest["val_metric"] = float(metric(mlp, w))
    _write_manifest(out, manifest)
    tail = f", val metric {_fmt(manifest['val_metric'])}" \
        if "val_metric" in manifest else ""
    print(f"learn: {cfg.algorithm}/{cfg.loss}, {len(log.rows)} log rows{tail}"
          f" -> {out}")
    return 0


# ---------------------------------------------------------------------------
# eval


EVAL_DEFAULTS = {"task_dir": "", "split": "test", "predictions": "",
                 "checkpoint": "", "weights": "", "out": "", "seed": 0,
                 "workers": 1, "epsilon": EPSILON, "rounded": "auto"}


def cmd_eval(cfg, user):
    _need(cfg, "task_dir", "out")
    if cfg.split not in ("train", "val", "test"):
        raise CliError("--split must be train, val, or test")
    if cfg.rounded not in ("auto", "true", "false"):
        raise CliError("--rounded must be auto, true, or false")
    bundle = tasks.load_bundle(cfg.task_dir)
    samples = bundle.split(cfg.split)
    if not samples:
        raise CliError(f"split {cfg.split!r} is empty")
    wrote_preds = False
    if cfg.predictions:
        preds = _parse_predictions(cfg.predictions)
    else:
        mlp = neural.load_mlp(cfg.checkpoint) if cfg.checkpoint else None
        if mlp is None:
            _strip_bindings(samples)
        w = (_read_weights(cfg.weights, samples[0].model.r) if cfg.weights
             else samples[0].model.weights)
        rounded = None if cfg.rounded == "auto" else (cfg.rounded == "true")
        preds = tasks.predict_bundle(bundle, cfg.split, mlp, w,
                                     rounded=rounded, epsilon=cfg.epsilon)
        wrote_preds = True
    report = tasks.evaluate(bundle, preds, cfg.split)
    out = _outdir(cfg)
    if wrote_preds:
        rows = sorted(_atom_row(a, v) for a, v in preds.items())
        _write_tsv(os.path.join(out, "predictions.tsv"), rows)
    _write_tsv(os.path.join(out, "report.tsv"),
               [(k, float(report[k])) for k in sorted(report)])
    _write_manifest(out, {
        "command": "eval", "task_dir": cfg.task_dir, "split": cfg.split,
        "seed": cfg.seed, "workers": cfg.workers, "epsilon": cfg.epsilon,
        "rounded": cfg.rounded, "metric": bundle.metric,
        **{f"report_{k}": float(v) for k, v in report.items()},
    })
    for k in sorted(report):
        print(f"{k}\t{_fmt(float(report[k]))}")
    return 0


# ---------------------------------------------------------------------------
# gen-data


GEN_DEFAULTS = {
    "task": "", "out": "", "seed": 0,
    "k": 1, "classes": 4, "pairs": 300, "label_fraction": 0.0,
    "puzzles": 50, "clues": 6,
    "nodes": 24, "edges": 60, "topics": 4, "homophily": 0.8,
    "instances": 50, "size": 6,
}


def cmd_gen_data(cfg, user):
    _need(cfg, "task", "out")
    if cfg.task not in tasks.GENERATORS:
        raise CliError(
            f"--task must be one of {', '.join(sorted(tasks.GENERATORS))}")
    fn, schema = tasks.GENERATORS[cfg.task]
    stray = user & set(GEN_DEFAULTS) - set(schema) - {"task", "out", "seed"}
    if stray:
        raise CliError(
            f"task {cfg.task!r} does not take: "
            + ", ".join(sorted(s.replace("_", "-") for s in stray)))
    kwargs = {k: getattr(cfg, k) for k in schema if k != "seed"}
    bundle = fn(seed=cfg.seed, **kwargs)
    tasks.write_bundle(bundle, cfg.out)
    sizes = ", ".join(f"{s}={len(bundle.split(s))}"
                      for s in ("train", "val", "test"))
    print(f"gen-data: {cfg.task} ({sizes} samples) -> {cfg.out}")
    return 0


# ---------------------------------------------------------------------------
# check


CHECK_DEFAULTS = {"solver": False, "gradients": False, "theorem11": False,
                  "policy": False, "tasks": False, "out": "", "seed": 0,
                  "workers": 1}


def _slack_bound(model):
    """Upper bound on any hinge value over the unit box (x, g folded)."""
    best = 0.0
    for p in model.potentials:
        const = p.expr.const
        const += sum(c * model.x_values[i] for i, c in p.expr.x.items())
        const += sum(c * model.g_values[i] for i, c in p.expr.g.items())
        hi = const + sum(max(c, 0.0) for c in p.expr.y.values())
        best = max(best, hi)
    return best


def _check_solver(seed):
    rng = np.random.default_rng(seed)
    rows = []
    worst = {"gap": 0.0, "kkt": 0.0, "compl": 0.0}
    for i in range(60):
        model = oracle.random_model(rng)
        res = solve(assemble(model, EPSILON), model.weights)
        worst["gap"] = max(worst["gap"], float(res.gap.max()))
        worst["kkt"] = max(worst["kkt"], float(res.viol.max()))
        worst["compl"] = max(worst["compl"], float(res.compl.max()))
    for k, tol in (("gap", GAP_TOL), ("kkt", 1e-6), ("compl", 1e-6)):
        rows.append(OracleReport(f"solver.{k}", "60 random models", 0.0,
                                 worst[k], tol, worst[k] <= tol))
    for i in range(6):
        model = oracle.random_model(rng, n_y=3, n_g=1, n_rules=2, n_pot=4,
                                    n_ineq=1, n_eq=0)
        res = solve(assemble(model, EPSILON), model.weights)
        _, v_grid = oracle.grid_map_refined(model, model.weights, EPSILON)
        rows.append(OracleReport.compare("solver.value_vs_grid", f"model {i}",
                                         v_grid, float(res.value[0]), 2e-3))
    for i in range(6):
        model = oracle.random_model(rng)
        res = solve(assemble(model, EPSILON), model.weights)
        _, v_sp = oracle.scipy_map(model, model.weights, EPSILON)
        rows.append(OracleReport.compare("solver.value_vs_scipy", f"model {i}",
                                         v_sp, float(res.value[0]), 5e-5))
    return rows


def _check_gradients(seed):
    rng = np.random.default_rng(seed)
    rows = []
    errs = []
    for i in range(12):
        model = oracle.random_model(rng)
        lq = assemble(model, EPSILON)
        g = model.g_values if model.n_g else None

        def fn(wv):
            res = solve(lq, wv)
            return float(res.value[0]), phi_vector(model, res.y_full[0], g)

        w0 = rng.uniform(0.3, 1.5, model.r)
        for _ in range(3):
            d = rng.standard_normal(model.r)
            d /= np.linalg.norm(d)
            chk = fd_check(fn, w0, d, h=1e-4)
            if not chk.kink:
                errs.append(chk.rel_err)
    errs = np.array(errs)
    rows.append(OracleReport("gradients.w_median", f"{len(errs)} probes", 0.0,
                             float(np.median(errs)), 1e-4,
                             float(np.median(errs)) <= 1e-4))
    rows.append(OracleReport("gradients.w_max", f"{len(errs)} probes", 0.0,
                             float(errs.max()), 1e-3, float(errs.max()) <= 1e-3))
    mu_err, n_mu, compl_max = 0.0, 0, 0.0
    h = 1e-5
    for i in range(8):
        model = oracle.random_model(rng)
        lq = assemble(model, EPSILON)
        res = solve(lq, model.weights)
        compl_max = max(compl_max, float(res.compl.max()))
        v0 = float(res.value[0])
        for direction in _b_directions(lq):
            vp = float(solve(dataclasses.replace(
                lq, b_const=lq.b_const + h * direction),
                model.weights).value[0])
            vm = float(solve(dataclasses.replace(
                lq, b_const=lq.b_const - h * direction),
                model.weights).value[0])
            fwd, bwd = (vp - v0) / h, (v0 - vm) / h
            if abs(fwd - bwd) <= 1e-5:
                analytic = float(res.mu[0] @ direction)
                mu_err = max(mu_err, abs((vp - vm) / (2 * h) - analytic))
                n_mu += 1
    rows.append(OracleReport("gradients.mu_vs_fd", f"{n_mu} smooth rows", 0.0,
                             mu_err, 1e-3, mu_err <= 1e-3))
    rows.append(OracleReport("gradients.compl_slack", "8 models", 0.0,
                             compl_max, 1e-6, compl_max <= 1e-6))
    return rows


def _b_directions(lq):
    """Feasibility-preserving unit perturbations of ``b``: one per hard row,
    with the two rows of an equality shifted as a pair (the offset is shared,
    so the subgradient is the multiplier difference)."""
    eq = set()
    for r in lq.eq_pairs:
        eq.update((int(r), int(r) + 1))
    out = []
    for r in lq.eq_pairs:
        d = np.zeros(len(lq.b_const))
        d[r], d[r + 1] = 1.0, -1.0
        out.append(d)
    for r in range(lq.rows_hard):
        if r not in eq:
            d = np.zeros(len(lq.b_const))
            d[r] = 1.0
            out.append(d)
    return out


def _check_theorem11(seed):
    rng = np.random.default_rng(seed)
    rows = []
    conc = conv = 0.0
    for i in range(60):
        model = oracle.random_model(rng)
        lq = assemble(model, EPSILON)
        for _ in range(3):
            w1 = rng.uniform(0.05, 2.0, model.r)
            w2 = rng.uniform(0.05, 2.0, model.r)
            vs = [float(solve(lq, wv).value[0])
                  for wv in (w1, w2, 0.5 * (w1 + w2))]
            conc = max(conc, 0.5 * (vs[0] + vs[1]) - vs[2])
        for _ in range(2):
            d = 0.05 * rng.standard_normal(len(lq.b_const))
            def vb(shift):
                return float(solve(
                    dataclasses.replace(lq, b_const=lq.b_const + shift),
                    model.weights).value[0])
            conv = max(conv, vb(0.5 * d) - 0.5 * (vb(d * 0.0) + vb(d)))
    rows.append(OracleReport("theorem11.concave_w", "180 triples", 0.0, conc,
                             1e-7, conc <= 1e-7))
    rows.append(OracleReport("theorem11.convex_b", "120 triples", 0.0, conv,
                             1e-7, conv <= 1e-7))
    margin_ok, worst = True, 0.0
    for i in range(40):
        model = oracle.random_model(rng)
        lq = assemble(model, EPSILON)
        w1 = rng.uniform(0.05, 2.0, model.r)
        w2 = rng.uniform(0.05, 2.0, model.r)
        n1, n2 = solve(lq, w1).nu[0], solve(lq, w2).nu[0]
        bound = ((1.0 + 2.0 * _slack_bound(model)) / EPSILON
                 * np.linalg.norm(w2 - w1))
        ratio = float(np.linalg.norm(n2 - n1) / max(bound, 1e-300))
        worst = max(worst, ratio)
        margin_ok &= ratio <= 1.0
    rows.append(OracleReport("theorem11.lipschitz", "40 weight pairs", 1.0,
                             worst, 0.0, margin_ok))
    m_err = a_err = 0.0
    for i in range(6):
        model = oracle.random_model(rng)
        res = solve(assemble(model, EPSILON), model.weights)
        for rho in (0.1, 1.0, 10.0):
            yhat = prox_point(model, rho, epsilon=EPSILON)
            m_val = float(solve(assemble(model, EPSILON), model.weights,
                                rho=rho, anchor=yhat).value[0])
            m_err = max(m_err, abs(m_val - float(res.value[0])))
            a_err = max(a_err, float(np.abs(yhat - res.y[0]).max()))
    rows.append(OracleReport("theorem11.moreau_value", "6 models x 3 rho",
                             0.0, m_err, 1e-6, m_err <= 1e-6))
    rows.append(OracleReport("theorem11.moreau_argmin", "6 models x 3 rho",
                             0.0, a_err, 1e-4, a_err <= 1e-4))
    return rows


def _check_policy(seed):
    rng = np.random.default_rng(seed)
    rows = []
    j2 = {(0,): 0.0, (1,): 1.0}
    _, grads = enumerated_policy_gradient([np.array([0.5, 0.5])],
                                          lambda c: j2[c])
    _, exact = oracle.exact_policy_value_grad([np.zeros(2)],
                                              lambda c: j2[c])
    diff = float(np.abs(grads[0] - exact[0]).max())
    rows.append(OracleReport("policy.two_outcome", "p=(.5,.5) J=(0,1)", 0.0,
                             diff, 1e-12, diff <= 1e-12))
    logits = [rng.standard_normal(3) for _ in range(3)]
    probs = [np.exp(z - z.max()) / np.exp(z - z.max()).sum() for z in logits]
    jtab = {c: float(rng.uniform(0, 2))
            for c in np.ndindex(3, 3, 3)}
    _, grads = enumerated_policy_gradient(probs, lambda c: jtab[c])
    _, exact = oracle.exact_policy_value_grad(logits, lambda c: jtab[c])
    diff = max(float(np.abs(a - b).max()) for a, b in zip(grads, exact))
    rows.append(OracleReport("policy.enumeration", "27-outcome categorical",
                             0.0, diff, 1e-10, diff <= 1e-10))
    _, grads = enumerated_policy_gradient(probs, lambda c: 3.5)
    diff = max(float(np.abs(a).max()) for a in grads)
    rows.append(OracleReport("policy.const_j", "score expectation", 0.0,
                             diff, 1e-12, diff <= 1e-12))
    pv = [np.array([0.4, 0.3, 0.2, 0.1])]
    jt = {c: float(rng.uniform(0, 1)) for c in np.ndindex(4)}
    variances = []
    ns = (1, 4, 16, 64)
    for n in ns:
        ests = np.stack([sampled_policy_gradient(pv, lambda c: jt[c], n, rng)[0]
                         for _ in range(400)])
        variances.append(float(ests.var(axis=0).mean()))
    slope = float(np.polyfit(np.log(ns), np.log(variances), 1)[0])
    rows.append(OracleReport("policy.variance_slope", "N in {1,4,16,64}",
                             -1.0, slope, 0.2, abs(slope + 1.0) <= 0.2))
    return rows


def _check_tasks(seed):
    rows = []
    mb = tasks.gen_mnist_add(k=1, classes=4, pairs=8, label_fraction=0.5,
                             seed=seed)
    mb2 = tasks.gen_mnist_add(k=1, classes=4, pairs=8, label_fraction=0.5,
                              seed=seed)
    rows.append(OracleReport("tasks.mnist_determinism", "pairs=8", 1.0,
                             float(mb.files == mb2.files), 0.0,
                             mb.files == mb2.files))
    ok = all(sum(d for _, d in row["digits"]) == row["sum"][1]
             for sp in ("train", "val", "test")
             for row in mb.info[sp]["pairs"])
    rows.append(OracleReport("tasks.mnist_sum_selfcheck", "all splits", 1.0,
                             float(ok), 0.0, ok))
    preds = {}
    for row in mb.info["test"]["pairs"]:
        for atom, d in row["digits"]:
            preds[atom] = d / 3.0
        preds[row["sum"][0]] = row["sum"][1] / 6.0
    rep = tasks.evaluate(mb, preds, "test")
    ok = rep["accuracy"] == 1.0 and rep["consistency"] == 1.0
    rows.append(OracleReport("tasks.mnist_perfect_eval", "test split", 1.0,
                             rep["accuracy"], 0.0, ok))

    sb = tasks.gen_sudoku4(puzzles=4, clues=6, seed=seed)
    ok = all(oracle.sudoku_valid(np.array(row["solution"]))
             for sp in ("train", "val", "test")
             for row in sb.info[sp]["puzzles"])
    rows.append(OracleReport("tasks.sudoku_solutions", "all splits", 1.0,
                             float(ok), 0.0, ok))
    mlp4 = neural.init_mlp([2, 8, 4], head="softmax", group=4, seed=seed)
    rep = tasks.evaluate(sb, tasks.predict_bundle(
        sb, "test", mlp4, sb.test[0].model.weights), "test")
    rows.append(OracleReport("tasks.sudoku_consistency", "rounded inference",
                             1.0, rep["consistency"], 0.0,
                             rep["consistency"] == 1.0))

    cb = tasks.gen_citation(nodes=12, edges=20, topics=3, homophily=0.9,
                            label_fraction=0.5, seed=seed)
    preds = {}
    for sp in ("train", "val", "test"):
        for n, c in cb.info[sp]["classes"].items():
            for t in range(3):
                preds[("Topic", (n, f"t{t}"))] = float(t == c)
    rep = tasks.evaluate(cb, preds, "test")
    rows.append(OracleReport("tasks.citation_perfect_eval", "test split", 1.0,
                             rep["accuracy"], 0.0, rep["accuracy"] == 1.0))

    gb = tasks.gen_grid_path(instances=3, size=4, seed=seed)
    mlp1 = neural.init_mlp([3, 8, 1], head="sigmoid", seed=seed)
    rep = tasks.evaluate(gb, tasks.predict_bundle(
        gb, "test", mlp1, gb.test[0].model.weights), "test")
    rows.append(OracleReport("tasks.grid_consistency", "rounded inference",
                             1.0, rep["consistency"], 0.0,
                             rep["consistency"] == 1.0))
    return rows


_CHECK_SUITES = (
    ("solver", _check_solver),
    ("gradients", _check_gradients),
    ("theorem11", _check_theorem11),
    ("policy", _check_policy),
    ("tasks", _check_tasks),
)


def cmd_check(cfg, user):
    picked = [name for name, _ in _CHECK_SUITES if getattr(cfg, name)]
    if not picked:
        picked = [name for name, _ in _CHECK_SUITES]
    rows = []
    for name, fn in _CHECK_SUITES:
        if name in picked:
            rows.extend(fn(cfg.seed))
    table = [("check", "instance", "oracle", "engine", "tol", "pass")]
    for r in rows:
        table.append((r.check, r.instance, r.oracle, r.engine, r.tol,
                      "pass" if r.ok else "FAIL"))
    for row in table:
        print("\t".join(_fmt(c) for c in row))
    if cfg.out:
        os.makedirs(os.path.dirname(cfg.out) or ".", exist_ok=True)
        _write_tsv(cfg.out, table)
    bad = [r for r in rows if not r.ok]
    if bad:
        print(f"check: {len(bad)} of {len(rows)} checks failed",
              file=sys.stderr)
        return EXIT_FAILURE
    print(f"check: all {len(rows)} checks passed")
    return 0


# ---------------------------------------------------------------------------
# argument wiring


def _add_common(p, defaults):
    p.add_argument("--config", help="key = value config file")
    for key, dv in defaults.items():
        flag = "--" + key.replace("_", "-")
        if isinstance(dv, bool):
            p.add_argument(flag, action="store_const", const=True,
                           default=None, help=f"(default {dv})")
        else:
            p.add_argument(flag, type=type(dv), default=None,
                           help=f"(default {dv!r})")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser():
    parser = _Parser(prog="nsebm",
                     description="neural-symbolic energy-based models")
    parser.add_argument("--version", action="version",
                        version=f"nsebm {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    for name, defaults, fn, desc in (
        ("ground", GROUND_DEFAULTS, cmd_ground,
         "ground a model/data pair and dump it"),
        ("infer", INFER_DEFAULTS, cmd_infer,
         "MAP inference over the targets"),
        ("learn", LEARN_DEFAULTS, cmd_learn,
         "train neural and symbolic parameters"),
        ("eval", EVAL_DEFAULTS, cmd_eval,
         "score predictions against a task bundle"),
        ("gen-data", GEN_DEFAULTS, cmd_gen_data,
         "generate a task bundle directory"),
        ("check", CHECK_DEFAULTS, cmd_check,
         "run engine-vs-oracle invariant suites"),
    ):
        p = sub.add_parser(name, help=desc, description=desc)
        _add_common(p, defaults)
        p.set_defaults(_defaults=defaults, _fn=fn)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if not getattr(args, "command", None):
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    try:
        cfg, user = _merge(args, args._defaults)
        return args._fn(cfg, user)
    except CliError as exc:
        print(f"nsebm {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (lang.LangError, grounding.GroundingError) as exc:
        print(f"nsebm {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except InfeasibleModel as exc:
        print(f"nsebm {args.command}: infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except LearningFailure as exc:
        print(f"nsebm {args.command}: failure: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE if "infeasible" in str(exc) else EXIT_FAILURE
    except SolverFailure as exc:
        print(f"nsebm {args.command}: failure: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
