"""Command-line front end.

One executable with subcommands covering generation, training, analysis,
sweeps, fits, and operator statistics.  A plain-text INI config file can
set any option; command-line flags win.  Every run writes an
effective-config snapshot beside its outputs.

Exit codes: 0 success, 2 config error, 3 cap violation, 4 missing input.
"""

from __future__ import annotations

import argparse
import configparser
import os
import sys

import numpy as np

from . import experiments, landscape, stats, theory
from .errors import (CapacityError, ConfigError, FormatError, LorascapeError,
                     UndefinedEstimateError)
from .model import LoraPoint, loss as model_loss
from .optimizer import RunResult, TrainConfig, multi_seed
from .rng import GENERATOR_ID
from .synthetic import (CE, MSE, gen_instance, gen_operator, load_instance,
                        load_operator, save_instance, save_operator)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_CAP = 3
EXIT_MISSING = 4

_CONFIG_SCHEMA: dict[str, set[str]] = {
    "global": {"workers", "dense_cap", "max_entries", "output_dir"},
    "train": {"rank", "loss", "init_scale", "base_step", "max_iters",
              "lambda_schedule", "seeds", "record_every"},
    "sweep": {"kn_grid", "rho_grid", "seeds_per_cell", "noise_std",
              "spurious_threshold", "k", "base_seed", "lambda_final",
              "rank", "workers", "max_iters"},
    "thresholds": {"cstar", "ranks"},
    "rank_select": {"k", "planted_rank", "ranks", "n_train", "n_test",
                    "seeds", "m", "n", "base_seed"},
    "ce_sweep": {"m", "n", "k", "n_samples", "ranks", "seeds", "base_seed"},
}


def load_config(path: str | None) -> dict[str, dict[str, str]]:
    if path is None:
        return {}
    if not os.path.exists(path):
        raise FileNotFoundError(f"config file {path} not found")
    parser = configparser.ConfigParser()
    try:
        parser.read(path)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse config: {exc}") from exc
    out: dict[str, dict[str, str]] = {}
    for section in parser.sections():
        if section not in _CONFIG_SCHEMA:
            raise ConfigError(f"unknown config section [{section}]")
        allowed = _CONFIG_SCHEMA[section]
        out[section] = {}
        for key, value in parser.items(section):
            if key not in allowed:
                raise ConfigError(f"unknown key {key!r} in section [{section}]")
            out[section][key] = value
    return out


def _cfg_get(cfg, section, key, default=None):
    return cfg.get(section, {}).get(key, default)


def parse_schedule(text: str) -> tuple[tuple[float, float], ...]:
    """Parse 'lam:tol,lam:tol,...' into a schedule tuple."""
    stages = []
    for part in text.split(","):
        lam, _, tol = part.partition(":")
        try:
            stages.append((float(lam), float(tol)))
        except ValueError as exc:
            raise ConfigError(f"bad schedule entry {part!r}") from exc
    return tuple(stages)


def parse_int_list(text: str) -> tuple[int, ...]:
    try:
        if ":" in text:
            start, _, stop = text.partition(":")
            return tuple(range(int(start), int(stop)))
        return tuple(int(x) for x in text.split(","))
    except ValueError as exc:
        raise ConfigError(f"bad integer list {text!r}") from exc


def parse_float_list(text: str) -> tuple[float, ...]:
    try:
        if text.count(":") == 2:
            start, stop, step = (float(x) for x in text.split(":"))
            count = int(round((stop - start) / step)) + 1
            return tuple(round(start + i * step, 10) for i in range(count))
        return tuple(float(x) for x in text.split(","))
    except ValueError as exc:
        raise ConfigError(f"bad float list {text!r}") from exc


def write_effective_config(out_dir: str, pairs: dict[str, object]) -> None:
    os.makedirs(out_dir, exist_ok=True)
    lines = [f"{key} = {value}" for key, value in sorted(pairs.items())]
    lines.append(f"generator = {GENERATOR_ID}")
    with open(os.path.join(out_dir, "effective_config.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# Subcommand implementations


def cmd_gen(args, cfg) -> int:
    max_entries = int(_cfg_get(cfg, "global", "max_entries", args.max_entries))
    op = gen_operator(args.m, args.n, args.K, args.N, args.seed, max_entries)
    save_operator(op, args.out)
    write_effective_config(args.out, dict(command="gen", m=args.m, n=args.n,
                                          K=args.K, N=args.N, seed=args.seed))
    print(f"wrote operator ({args.m}x{args.n}, K={args.K}, N={args.N}) to {args.out}")
    return EXIT_OK


def _build_instance(args):
    if args.instance:
        return load_instance(args.instance), {"instance_path": os.path.abspath(args.instance)}
    for field in ("m", "n", "K", "N"):
        if getattr(args, field) is None:
            raise ConfigError("either --instance or all of --m/--n/--K/--N are required")
    op = gen_operator(args.m, args.n, args.K, args.N, args.op_seed)
    inst = gen_instance(op, args.target_rank, args.noise_std, args.loss,
                        args.inst_seed)
    prov = dict(m=args.m, n=args.n, K=args.K, N=args.N, op_seed=args.op_seed,
                target_rank=args.target_rank, noise_std=args.noise_std,
                inst_seed=args.inst_seed, loss_kind=args.loss)
    return inst, prov


def _rebuild_instance(conf: dict[str, str]):
    if "instance_path" in conf:
        return load_instance(conf["instance_path"])
    op = gen_operator(int(conf["m"]), int(conf["n"]), int(conf["K"]),
                      int(conf["N"]), int(conf["op_seed"]))
    return gen_instance(op, int(conf["target_rank"]), float(conf["noise_std"]),
                        conf["loss_kind"], int(conf["inst_seed"]))


def _train_config_from(args, cfg) -> TrainConfig:
    schedule = parse_schedule(
        args.lambda_schedule
        or _cfg_get(cfg, "train", "lambda_schedule", "1e-2:1e-6,1e-3:1e-7,1e-4:1e-8"))
    seeds_text = args.seeds or _cfg_get(cfg, "train", "seeds", "0:50")
    init_scale = args.init_scale
    if init_scale is None and _cfg_get(cfg, "train", "init_scale") is not None:
        init_scale = float(_cfg_get(cfg, "train", "init_scale"))
    return TrainConfig(
        rank=args.rank if args.rank is not None else int(_cfg_get(cfg, "train", "rank", 1)),
        init_scale=init_scale,
        base_step=float(args.base_step if args.base_step is not None
                        else _cfg_get(cfg, "train", "base_step", 1.0)),
        max_iters=int(args.max_iters if args.max_iters is not None
                      else _cfg_get(cfg, "train", "max_iters", 200_000)),
        lambda_schedule=schedule,
        seeds=parse_int_list(seeds_text),
        record_every=int(args.record_every if args.record_every is not None
                         else _cfg_get(cfg, "train", "record_every", 10)),
    )


def _run_dir(out: str, seed: int) -> str:
    return os.path.join(out, f"run_s{seed:04d}")


def _write_run(out: str, res: RunResult, inst, kind: str) -> None:
    rdir = _run_dir(out, res.seed)
    os.makedirs(rdir, exist_ok=True)
    rep = model_loss(inst, res.point, kind)
    pairs = {
        "seed": res.seed,
        "converged": int(res.converged),
        "grad_norm": repr(res.grad_norm),
        "iterations": res.iterations,
        "stage_reached": res.stage_reached,
        "final_lambda": repr(res.point.lam),
        "data_loss": repr(rep.data_loss),
        "total_loss": repr(rep.total),
        "loss_kind": kind,
        "rank": res.point.rank,
        "m": res.point.u.shape[0],
        "n": res.point.v.shape[0],
        "message": res.message or "-",
    }
    with open(os.path.join(rdir, "record.txt"), "w") as fh:
        for key, value in pairs.items():
            fh.write(f"{key} = {value}\n")
    res.point.u.astype("<f8").tofile(os.path.join(rdir, "u.bin"))
    res.point.v.astype("<f8").tofile(os.path.join(rdir, "v.bin"))
    with open(os.path.join(rdir, "trace.tsv"), "w") as fh:
        fh.write("iteration\ttotal_loss\tgrad_norm\n")
        for it, lo, gn in res.trace:
            fh.write(f"{int(it)}\t{lo!r}\t{gn!r}\n")


def _read_record(rdir: str) -> dict[str, str]:
    path = os.path.join(rdir, "record.txt")
    if not os.path.exists(path):
        raise FileNotFoundError(f"no run record at {path}")
    out = {}
    with open(path) as fh:
        for line in fh:
            key, _, value = line.partition("=")
            out[key.strip()] = value.strip()
    return out


def _read_effective_config(run_dir: str) -> dict[str, str]:
    parent = os.path.dirname(os.path.abspath(run_dir).rstrip(os.sep))
    path = os.path.join(parent, "effective_config.txt")
    if not os.path.exists(path):
        raise FileNotFoundError(f"no effective_config.txt beside {run_dir}")
    out = {}
    with open(path) as fh:
        for line in fh:
            key, _, value = line.partition("=")
            out[key.strip()] = value.strip()
    return out


def _load_run(run_dir: str) -> tuple[RunResult, object, str]:
    record = _read_record(run_dir)
    conf = _read_effective_config(run_dir)
    inst = _rebuild_instance(conf)
    m, n, rank = int(record["m"]), int(record["n"]), int(record["rank"])
    u = np.fromfile(os.path.join(run_dir, "u.bin"), dtype="<f8").reshape(m, rank)
    v = np.fromfile(os.path.join(run_dir, "v.bin"), dtype="<f8").reshape(n, rank)
    point = LoraPoint(u, v, float(record["final_lambda"]))
    trace_path = os.path.join(run_dir, "trace.tsv")
    rows = []
    with open(trace_path) as fh:
        next(fh)
        for line in fh:
            it, lo, gn = line.split("\t")
            rows.append((float(it), float(lo), float(gn)))
    res = RunResult(point, float(record["grad_norm"]), np.array(rows),
                    int(record["iterations"]), bool(int(record["converged"])),
                    int(record["stage_reached"]), int(record["seed"]),
                    record.get("message", ""))
    kind = record["loss_kind"]
    return res, inst, kind


def _sibling_losses(run_dir: str) -> list[float]:
    parent = os.path.dirname(os.path.abspath(run_dir).rstrip(os.sep))
    losses = []
    for name in sorted(os.listdir(parent)):
        rdir = os.path.join(parent, name)
        if name.startswith("run_s") and os.path.isdir(rdir):
            try:
                rec = _read_record(rdir)
            except FileNotFoundError:
                continue
            if int(rec.get("converged", "0")):
                losses.append(float(rec["data_loss"]))
    return losses


def cmd_train(args, cfg) -> int:
    inst, prov = _build_instance(args)
    kind = args.loss
    tcfg = _train_config_from(args, cfg)
    snapshot = dict(command="train", loss=kind, rank=tcfg.rank,
                    seeds=",".join(map(str, tcfg.seeds)),
                    lambda_schedule=",".join(f"{l}:{t}" for l, t in tcfg.lambda_schedule),
                    max_iters=tcfg.max_iters, **prov)
    write_effective_config(args.out, snapshot)
    results = multi_seed(inst, tcfg, kind)
    for res in results:
        _write_run(args.out, res, inst, kind)
    n_conv = sum(r.converged for r in results)
    print(f"trained {len(results)} seeds ({n_conv} converged) into {args.out}")
    for res in results:
        rep = model_loss(inst, res.point, kind)
        print(f"  seed {res.seed}: converged={res.converged} "
              f"data_loss={rep.data_loss:.6e} grad={res.grad_norm:.2e} "
              f"iters={res.iterations}")
    return EXIT_OK


def cmd_analyze(args, cfg) -> int:
    res, inst, kind = _load_run(args.run)
    floor = landscape.global_floor(inst, _sibling_losses(args.run))
    report = landscape.classify(inst, res, kind, floor)
    print(render_report(report))
    return EXIT_OK


def render_report(rep: landscape.CriticalPointReport) -> str:
    lines = [
        f"classification   = {rep.classification}",
        f"grad_norm        = {rep.grad_norm:.6e}",
        f"balance_residual = {rep.balance_residual:.6e}",
        f"data_loss        = {rep.loss.data_loss:.6e}",
        f"reg_loss         = {rep.loss.reg_loss:.6e}",
        f"total_loss       = {rep.loss.total:.6e}",
        f"floor            = {rep.floor:.6e}",
        f"gap              = {rep.gap:.6e}",
        f"min_hessian_eig  = {rep.min_hessian_eig:.6e}",
        f"h_norm           = {rep.h_norm:.6e}",
        f"lambda           = {rep.lam:.6e}",
        f"effective_rank   = {rep.effective_rank}",
    ]
    if rep.blocks is not None:
        b = rep.blocks
        lines += [
            f"r11_deviation    = {b.r11_deviation:.6e}",
            f"r12_norm         = {b.r12_norm:.6e}",
            f"r21_norm         = {b.r21_norm:.6e}",
            f"sigma1_r22       = {b.sigma1_r22:.6e}",
        ]
    if rep.q_eigs is not None and rep.q_eigs.size:
        lines.append(f"q_eigs_min       = {rep.q_eigs.min():.6e}")
        lines.append(f"q_eigs_max       = {rep.q_eigs.max():.6e}")
    if rep.certificate is not None:
        c = rep.certificate
        lines += [
            f"cert_op_norm_R   = {c.op_norm_r:.6e}",
            f"cert_op_norm_ok  = {int(c.op_norm_ok)}",
            f"cert_residuals   = {c.subgrad_residuals[0]:.3e},"
            f"{c.subgrad_residuals[1]:.3e},{c.subgrad_residuals[2]:.3e}",
            f"certified_global = {int(c.certified_global)}",
        ]
    t = rep.tolerances
    lines.append(f"tolerances       = grad:{t.grad_tol_scale:g} eig:{t.eig_tol_scale:g} "
                 f"rank:{t.rank_tol_scale:g} gap_abs:{t.gap_tol_abs:g} "
                 f"gap_rel:{t.gap_tol_rel:g}")
    return "\n".join(lines)


def cmd_sweep_boundary(args, cfg) -> int:
    kn_grid = parse_int_list(args.kn_grid or _cfg_get(cfg, "sweep", "kn_grid", "8,16,32,64"))
    rho_text = args.rho_grid or _cfg_get(cfg, "sweep", "rho_grid")
    rho_grid = parse_float_list(rho_text) if rho_text else experiments.DEFAULT_RHO_GRID
    lam_text = args.lambda_final or _cfg_get(cfg, "sweep", "lambda_final", "calibrated")
    lam_final = None if lam_text == "calibrated" else float(lam_text)
    scfg = experiments.SweepConfig(
        kn_grid=tuple(kn_grid),
        rho_grid=tuple(rho_grid),
        rank=int(args.rank if args.rank is not None else _cfg_get(cfg, "sweep", "rank", 1)),
        seeds_per_cell=int(args.seeds_per_cell if args.seeds_per_cell is not None
                           else _cfg_get(cfg, "sweep", "seeds_per_cell", 50)),
        noise_std=float(args.noise_std if args.noise_std is not None
                        else _cfg_get(cfg, "sweep", "noise_std", 0.01)),
        spurious_threshold=float(args.threshold if args.threshold is not None
                                 else _cfg_get(cfg, "sweep", "spurious_threshold", 0.05)),
        K=int(args.K if args.K is not None else _cfg_get(cfg, "sweep", "k", 2)),
        base_seed=int(args.base_seed if args.base_seed is not None
                      else _cfg_get(cfg, "sweep", "base_seed", 0)),
        lambda_final=lam_final,
        max_iters=int(_cfg_get(cfg, "sweep", "max_iters", 200_000)),
        workers=int(args.workers if args.workers is not None
                    else _cfg_get(cfg, "sweep", "workers",
                                  _cfg_get(cfg, "global", "workers", 1))),
    )
    os.makedirs(args.out, exist_ok=True)
    write_effective_config(args.out, dict(
        command="sweep-boundary", kn_grid=",".join(map(str, scfg.kn_grid)),
        rho_grid=",".join(f"{r:g}" for r in scfg.rho_grid), rank=scfg.rank,
        seeds_per_cell=scfg.seeds_per_cell, noise_std=scfg.noise_std,
        spurious_threshold=scfg.spurious_threshold, K=scfg.K,
        base_seed=scfg.base_seed, lambda_final=lam_text,
        config_hash=scfg.config_hash(), workers=scfg.workers,
    ))

    def progress(key, records):
        kn, rho_idx = key
        frac = experiments._spurious_fraction(records)
        print(f"  cell KN={kn} rho={scfg.rho_grid[rho_idx]:.3f} "
              f"spurious={frac:.2%}", flush=True)

    result = experiments.boundary_sweep(scfg, args.out, progress=progress)
    print(f"sweep complete: {len(result.records)} records in {args.out}")
    for kn in sorted(result.summaries):
        s = result.summaries[kn]
        print(f"  KN={kn}: C* = {s.cstar if s.cstar is not None else 'NA'}"
              f"  c_emp = {s.c_emp if s.c_emp is not None else 'NA'}")
    if result.c_bar is not None:
        print(f"  c_bar = {result.c_bar:.4f}  C*_theory = {result.cstar_theory:.4f}")
    if result.tw_fit is not None:
        cinf, b, resid = result.tw_fit
        print(f"  TW fit: C*_inf = {cinf:.4f}  b = {b:.4f}  residual = {resid:.2e}")
    return EXIT_OK


def cmd_fit_cstar(args, cfg) -> int:
    if not os.path.exists(args.summary):
        raise FileNotFoundError(f"summary table {args.summary} not found")
    points = []
    with open(args.summary) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.lower().startswith("kn"):
                continue
            parts = line.replace(",", "\t").split()
            if len(parts) < 2 or parts[1] == "NA":
                continue
            points.append((float(parts[0]), float(parts[1])))
    if not points:
        raise FormatError(f"no (KN, Cstar) rows found in {args.summary}")
    cs = [theory.c_from_cstar(c) for kn, c in points if kn >= args.aggregate_min_kn]
    if cs:
        c_bar = float(np.mean(cs))
        print(f"c_bar (KN >= {args.aggregate_min_kn}) = {c_bar:.6f}")
        print(f"C*_from_c_bar = {theory.cstar_from_c(c_bar):.6f}")
    cinf, b, resid = theory.tracy_widom_fit(points)
    print(f"TW fit: C*_inf = {cinf:.6f}  b = {b:.6f}  residual = {resid:.3e}")
    return EXIT_OK


def cmd_thresholds(args, cfg) -> int:
    cstar = float(args.cstar if args.cstar is not None
                  else _cfg_get(cfg, "thresholds", "cstar", 1.35))
    ranks_text = args.ranks or _cfg_get(cfg, "thresholds", "ranks", "")
    ranks = parse_int_list(ranks_text) if ranks_text else ()
    rep = theory.threshold_report(args.m, args.n, args.K, args.N, cstar, ranks)
    print(f"old rule r(r+1)/2 > KN: r >= {rep.old_min_rank} "
          f"(computed; commonly quoted as r >= {rep.old_min_rank_sqrt_approx} "
          f"via the sqrt(2KN) rounding)")
    print(f"new rule r(m+n) - r^2 > C*.KN with C* = {rep.cstar_used:g}: "
          f"r >= {rep.new_min_rank}")
    for r, rho in sorted(rep.rho_at.items()):
        print(f"  rho(r={r}) = {rho:.4f}")
    return EXIT_OK


def cmd_pl_estimate(args, cfg) -> int:
    res, inst, kind = _load_run(args.run)
    if args.l_star is not None:
        l_star = float(args.l_star)
    else:
        parent = os.path.dirname(os.path.abspath(args.run).rstrip(os.sep))
        finals = []
        for name in sorted(os.listdir(parent)):
            rdir = os.path.join(parent, name)
            if name.startswith("run_s") and os.path.isdir(rdir):
                try:
                    rec = _read_record(rdir)
                    finals.append(float(rec["total_loss"]))
                except (FileNotFoundError, KeyError):
                    continue
        if not finals:
            raise FileNotFoundError("no sibling run records to set the loss floor")
        l_star = min(finals)
    est = theory.pl_estimate(res.trace[:, 1:3], l_star)
    print(f"mu_hat = {est.mu_hat:.6e}")
    print(f"l_star_used = {est.l_star_used:.6e}")
    print(f"trajectory_length = {est.trajectory_length}")
    print(f"pairs_used = {est.pairs_used}")
    return EXIT_OK


def cmd_rank_select(args, cfg) -> int:
    result = experiments.rank_selection_experiment(
        K=int(args.K if args.K is not None else _cfg_get(cfg, "rank_select", "k", 3)),
        planted_rank=int(args.planted_rank if args.planted_rank is not None
                         else _cfg_get(cfg, "rank_select", "planted_rank", 2)),
        n_train=int(args.n_train if args.n_train is not None
                    else _cfg_get(cfg, "rank_select", "n_train", 64)),
        n_test=(int(args.n_test) if args.n_test is not None else None),
        ranks=parse_int_list(args.ranks or _cfg_get(cfg, "rank_select", "ranks", "1,2,4")),
        seeds=int(args.seeds if args.seeds is not None
                  else _cfg_get(cfg, "rank_select", "seeds", 5)),
        m=int(args.m if args.m is not None else _cfg_get(cfg, "rank_select", "m", 8)),
        n=int(args.n if args.n is not None else _cfg_get(cfg, "rank_select", "n", 8)),
        base_seed=int(args.base_seed if args.base_seed is not None
                      else _cfg_get(cfg, "rank_select", "base_seed", 0)),
    )
    print(f"rank selection: K={result.K} planted_rank={result.planted_rank} "
          f"n_train={result.n_train} n_test={result.n_test} "
          f"dims={result.m}x{result.n}")
    print("rank\tseed\ttrain_loss\ttest_loss\ttrain_acc\ttest_acc")
    for c in result.cells:
        print(f"{c.rank}\t{c.seed}\t{c.train_loss:.4e}\t{c.test_loss:.4e}"
              f"\t{c.train_accuracy:.4f}\t{c.test_accuracy:.4f}")
    means = result.mean_test_accuracy()
    for rank in result.ranks:
        print(f"mean_test_accuracy[r={rank}] = {means[rank]:.4f}")
    return EXIT_OK


def cmd_jstats(args, cfg) -> int:
    op = load_operator(args.operator)
    blocks = None
    if args.split_rows is not None:
        blocks = stats.row_split_blocks(op, args.split_rows)
    report = stats.jacobian_stats(op, blocks,
                                  effective_rank_threshold=args.threshold,
                                  seed=args.seed)
    print(f"{'block':24s} {'count':>10s} {'skew':>10s} {'ex_kurt':>10s} {'KS':>8s}")
    for name, b in report.blocks.items():
        flag = "*" if b.subsampled else ""
        print(f"{name:24s} {b.count:>10d} {b.skewness:>10.4f} "
              f"{b.excess_kurtosis:>10.4f} {b.ks_distance:>8.4f}{flag}")
    if report.gram is not None:
        g = report.gram
        print(f"gram: top_eig = {g.top_eig:.4e}  min_nonzero = {g.min_nonzero_eig:.4e}  "
              f"cond = {g.condition_number:.4e}")
        print(f"gram: effective_rank = {g.effective_rank} "
              f"(threshold {g.threshold:g} of max, KN = {g.kn})")
    else:
        print(f"gram: skipped ({report.gram_skipped_reason})")
    for (a, b), (mean_abs, max_abs) in report.cross_correlations.items():
        print(f"cross[{a} vs {b}]: mean|rho| = {mean_abs:.4f}  max|rho| = {max_abs:.4f}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lorascape",
        description="Landscape diagnostics for low-rank adapter training "
                    "on linearized models.")
    parser.add_argument("--config", help="INI config file; flags override it")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a Gaussian feature operator")
    p.add_argument("--m", type=int, required=True, help="row dimension")
    p.add_argument("--n", type=int, required=True, help="column dimension")
    p.add_argument("--K", type=int, required=True, help="output dimension")
    p.add_argument("--N", type=int, required=True, help="sample count")
    p.add_argument("--seed", type=int, default=0, help="generation seed (default 0)")
    p.add_argument("--out", required=True, help="output operator directory")
    p.add_argument("--max-entries", type=int, default=1 << 26,
                   help="memory cap on m*n*K*N (default %(default)s)")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train factor pairs to critical points")
    p.add_argument("--instance", help="instance directory (else generate inline)")
    p.add_argument("--m", type=int, help="row dimension (inline generation)")
    p.add_argument("--n", type=int, help="column dimension (inline generation)")
    p.add_argument("--K", type=int, help="output dimension (inline generation)")
    p.add_argument("--N", type=int, help="sample count (inline generation)")
    p.add_argument("--op-seed", type=int, default=0, help="operator seed (default 0)")
    p.add_argument("--inst-seed", type=int, default=0, help="instance seed (default 0)")
    p.add_argument("--target-rank", type=int, default=1,
                   help="planted target rank (default 1)")
    p.add_argument("--noise-std", type=float, default=0.01,
                   help="label noise std (default 0.01)")
    p.add_argument("--loss", choices=(MSE, CE), default=MSE,
                   help="loss kind (default mse)")
    p.add_argument("--rank", type=int, help="adapter rank (default 1)")
    p.add_argument("--seeds", help="init seeds, 'a:b' range or comma list (default 0:50)")
    p.add_argument("--lambda-schedule",
                   help="stages 'lam:tol,...' (default 1e-2:1e-6,1e-3:1e-7,1e-4:1e-8)")
    p.add_argument("--init-scale", type=float, help="init entry std "
                   "(default 1e-2/sqrt(max(m,n)))")
    p.add_argument("--base-step", type=float, help="largest line-search step (default 1.0)")
    p.add_argument("--max-iters", type=int, help="per-stage iteration cap (default 200000)")
    p.add_argument("--record-every", type=int, help="trace subsampling stride (default 10)")
    p.add_argument("--out", required=True, help="output directory for run records")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("analyze", help="classify a saved training run")
    p.add_argument("--run", required=True, help="run directory (run_sNNNN)")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("sweep-boundary", help="spurious-fraction boundary sweep")
    p.add_argument("--out", required=True, help="sweep output directory")
    p.add_argument("--kn-grid", help="target counts, comma list (default 8,16,32,64)")
    p.add_argument("--rho-grid", help="'start:stop:step' or comma list "
                   "(default 0.8:2.0:0.075)")
    p.add_argument("--rank", type=int, help="adapter and planted rank (default 1)")
    p.add_argument("--seeds-per-cell", type=int, help="init seeds per cell (default 50)")
    p.add_argument("--noise-std", type=float, help="label noise std (default 0.01)")
    p.add_argument("--threshold", type=float,
                   help="spurious-fraction boundary threshold (default 0.05)")
    p.add_argument("--K", type=int, help="output dimension (default 2)")
    p.add_argument("--base-seed", type=int, help="sweep base seed (default 0)")
    p.add_argument("--lambda-final",
                   help="final decay stage: 'calibrated' or a value (default calibrated)")
    p.add_argument("--workers", type=int, help="process pool size (default 1)")
    p.set_defaults(func=cmd_sweep_boundary)

    p = sub.add_parser("fit-cstar", help="aggregate constants and finite-size fit")
    p.add_argument("--summary", required=True,
                   help="TSV with KN and Cstar columns (summary.tsv)")
    p.add_argument("--aggregate-min-kn", type=int, default=32,
                   help="smallest KN entering c_bar (default 32)")
    p.set_defaults(func=cmd_fit_cstar)

    p = sub.add_parser("thresholds", help="closed-form minimal-rank calculators")
    p.add_argument("--m", type=int, required=True, help="row dimension")
    p.add_argument("--n", type=int, required=True, help="column dimension")
    p.add_argument("--K", type=int, required=True, help="output dimension")
    p.add_argument("--N", type=int, required=True, help="sample count")
    p.add_argument("--cstar", type=float, help="threshold constant (default 1.35)")
    p.add_argument("--ranks", help="also report rho at these ranks, comma list")
    p.set_defaults(func=cmd_thresholds)

    p = sub.add_parser("pl-estimate", help="gradient-domination constant of a run")
    p.add_argument("--run", required=True, help="run directory (run_sNNNN)")
    p.add_argument("--l-star", type=float,
                   help="loss floor (default: best sibling terminal loss)")
    p.set_defaults(func=cmd_pl_estimate)

    p = sub.add_parser("rank-select", help="train/test accuracy across adapter ranks")
    p.add_argument("--K", type=int, help="class count (default 3)")
    p.add_argument("--planted-rank", type=int, help="planted target rank (default 2)")
    p.add_argument("--ranks", help="adapter ranks, comma list (default 1,2,4)")
    p.add_argument("--n-train", type=int, help="training samples (default 64)")
    p.add_argument("--n-test", type=int, help="held-out samples (default 50x train)")
    p.add_argument("--seeds", type=int, help="init seeds per rank (default 5)")
    p.add_argument("--m", type=int, help="row dimension (default 8)")
    p.add_argument("--n", type=int, help="column dimension (default 8)")
    p.add_argument("--base-seed", type=int, help="instance seed (default 0)")
    p.set_defaults(func=cmd_rank_select)

    p = sub.add_parser("jstats", help="entry-wise and spectral operator diagnostics")
    p.add_argument("--operator", required=True, help="operator directory")
    p.add_argument("--split-rows", type=int,
                   help="two-block partition boundary row (stacked matrices)")
    p.add_argument("--threshold", type=float, default=0.01,
                   help="effective-rank relative threshold (default 0.01)")
    p.add_argument("--seed", type=int, default=0,
                   help="subsampling seed (default 0)")
    p.set_defaults(func=cmd_jstats)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config)
        return args.func(args, cfg)
    except ConfigError as exc:
        print(f"error: ConfigError: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CapacityError as exc:
        print(f"error: CapacityError: {exc}", file=sys.stderr)
        return EXIT_CAP
    except (FileNotFoundError, FormatError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except UndefinedEstimateError as exc:
        print(f"error: UndefinedEstimateError: {exc}", file=sys.stderr)
        return 1
    except LorascapeError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
