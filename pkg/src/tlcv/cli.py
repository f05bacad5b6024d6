"""Command-line pipeline: simulate -> make-pairs -> train -> calibrate/project -> smd / opes -> fes -> report.

Every stage writes under ``--out`` (data/, models/, smd/, opes/, report/) and
leaves a manifest recording the config hash and the checksums of its inputs
and outputs. Later stages verify those checksums before using an artifact.
Exit codes: 0 ok, 2 configuration or usage error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import analysis as A
from . import config as C
from . import cvmodels as CV
from . import dynamics as D
from . import enhanced as E
from . import flowgen as FG
from . import io as IO
from . import nn
from . import plots
from .errors import (ChecksumMismatch, ConfigError, ContractViolation, DegenerateEncoderError, DegenerateGeometryError,
                     EmptyDatasetError, GenerationDiverged, IllConditionedError, SimulationDiverged, TlcError,
                     TrainingDiverged)
from .systems import ReferenceCv, basin_coordinate, basin_minimum, make_system, reference_coordinate

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
_NUMERIC = (SimulationDiverged, TrainingDiverged, GenerationDiverged, IllConditionedError, DegenerateEncoderError,
            DegenerateGeometryError, FloatingPointError)


class Run:
    def __init__(self, cfg: dict, out: Path):
        self.cfg = cfg
        self.out = Path(out)
        self.hash = C.config_hash(cfg)
        s = cfg["system"]
        self.system = make_system(s["kind"], s["parameters"], s["mass"], s["threshold"])
        lv = cfg["langevin"]
        self.langevin = D.LangevinParams(lv["dt"], lv["gamma"], lv["temperature"], cfg["seed"])
        self.beta = 1.0 / lv["temperature"] if lv["temperature"] > 0 else math.inf

    def path(self, *parts) -> Path:
        return self.out.joinpath(*parts)

    def rel(self, p: Path) -> str:
        return p.relative_to(self.out).as_posix()

    def manifest(self, stage_dir: str, name: str, inputs, outputs, **extra):
        doc = {"stage": name, "config_hash": self.hash, "seed": self.cfg["seed"],
               "inputs": {self.rel(p): IO.sha256_file(p) for p in inputs},
               "outputs": {self.rel(p): IO.sha256_file(p) for p in outputs}}
        doc.update(extra)
        return IO.save_json(self.path(stage_dir, f"{name}_manifest.json"), doc)

    def load_manifest(self, stage_dir: str, name: str, verify=True) -> dict:
        p = self.path(stage_dir, f"{name}_manifest.json")
        if not p.exists():
            return {}
        doc = IO.load_json(p)
        if verify:
            for rel, digest in doc["outputs"].items():
                IO.verify_checksum(self.path(rel), digest)
        return doc


class _Lock:
    def __init__(self, out: Path):
        self.path = Path(out) / ".lock"

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise ConfigError(f"output directory {self.path.parent} is in use (remove {self.path} if stale)")
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        return self

    def __exit__(self, *exc):
        try:
            self.path.unlink()
        except FileNotFoundError:
            pass


def _log(msg):
    print(msg, file=sys.stderr)


# --- stages --------------------------------------------------------------------

def cmd_simulate(run: Run):
    d = run.cfg["data"]
    trajs = D.basin_trajectories(run.system, run.langevin, d["n_trajs_per_basin"], d["n_steps"], d["record_stride"])
    files = []
    for label in "AB":
        for j, tr in enumerate(trajs[label]):
            files.append(IO.save_trajectory(run.path("data", f"traj_{label}_{j:03d}.trj"), tr))
    run.manifest("data", "simulate", [], files, labels=[f.name[5] for f in files])
    _log(f"simulate: wrote {len(files)} trajectories")
    return files


def _trajectories(run: Run):
    man = run.load_manifest("data", "simulate")
    if not man:
        cmd_simulate(run)
        man = run.load_manifest("data", "simulate")
    paths = [run.path(r) for r in sorted(man["outputs"])]
    return paths, [IO.load_trajectory(p) for p in paths]


def cmd_make_pairs(run: Run):
    d = run.cfg["data"]
    paths, trajs = _trajectories(run)
    rng = np.random.default_rng(np.random.SeedSequence(run.cfg["seed"], spawn_key=(7,)))
    ds = D.extract_pairs(trajs, d["tau_frames"] * d["record_stride"], d["exclude_transitions"],
                         d["max_pairs"] or None, rng, run.system)
    out = IO.save_pairs(run.path("data", "pairs.bin"), ds)
    run.manifest("data", "pairs", paths, [out], n_pairs=len(ds), tau_steps=ds.tau_steps)
    _log(f"make-pairs: {len(ds)} pairs")
    return ds


def _pairs(run: Run):
    man = run.load_manifest("data", "pairs")
    if not man:
        return cmd_make_pairs(run)
    return IO.load_pairs(run.path("data", "pairs.bin"))


def _basin_a_samples(ds):
    return ds.x_t[ds.in_a_t] if ds.in_a_t.any() else ds.x_t


def cmd_train(run: Run):
    m = run.cfg["model"]
    ds = _pairs(run)
    name = m["name"]
    ref = basin_minimum(run.system, "A")
    mode = m["input_mode"] or CV.default_input_mode(run.system)
    seed = run.cfg["seed"]
    outputs = []
    extra = {"model": name, "input_mode": mode}
    if name == "tlc":
        tc = FG.TlcConfig(tau_steps=ds.tau_steps, lam=m["lam"], sigma=m["sigma"], lr=m["lr"],
                          batch_size=m["batch_size"], n_iters=m["n_iters"], ode_steps=m["ode_steps"], seed=seed,
                          encoder_hidden=tuple(m["encoder_hidden"]), flow_hidden=tuple(m["flow_hidden"]),
                          activation=m["activation"], input_mode=mode)
        res = FG.train_tlc(ds, tc, reference=ref)
        enc = res.encoder
        outputs.append(IO.save_csv(run.path("models", "loss_history.csv"), ["iter", "l_cfm", "l_ac", "l_total"],
                                   [(i, *map(float, row)) for i, row in enumerate(res.history)]))
        extra["degenerate_batches"] = res.degenerate_batches
        enc_path = IO.save_json(run.path("models", "encoder.json"), CV.encoder_to_dict(enc))
        flow_doc = FG.flow_to_dict(res.flow, IO.sha256_file(enc_path))
        outputs += [enc_path, IO.save_json(run.path("models", "flow.json"), flow_doc)]
    else:
        bc = CV.BaselineConfig(hidden=tuple(m["encoder_hidden"]), activation=m["activation"], lr=m["lr"],
                               batch_size=m["batch_size"], n_iters=m["n_iters"], seed=seed, input_mode=mode,
                               beta_kl=m["beta_kl"], ac_weight=m["ac_weight"])
        template = CV.make_encoder(run.system, (1,), "identity", seed, mode, ref)
        if name in ("tae", "vde"):
            res = (CV.train_tae if name == "tae" else CV.train_vde)(ds, bc, reference=ref)
            enc = res.encoder
            outputs.append(IO.save_json(run.path("models", "decoder.json"), nn.net_to_dict(res.decoder)))
        elif name == "deeptda":
            res = CV.train_deeptda(ds.x_t, ds.in_a_t, bc, reference=ref, spatial_dim=run.system.spatial_dim)
            enc = res.encoder
        elif name == "tica":
            lcv = CV.fit_linear_tica(ds, m["reg"], features=lambda X: CV.featurize(template, X))
            enc = CV.linear_encoder(lcv, ref, run.system.spatial_dim, mode)
            outputs.append(IO.save_csv(run.path("models", "eigenvalues.csv"), ["index", "eigenvalue"],
                                       [(i, float(v)) for i, v in enumerate(lcv.eigenvalues)]))
            res = None
        else:
            lcv = CV.fit_lda(CV.featurize(template, ds.x_t), ds.in_a_t, m["reg"])
            enc = CV.linear_encoder(lcv, ref, run.system.spatial_dim, mode)
            res = None
        if res is not None:
            outputs.append(IO.save_csv(run.path("models", "loss_history.csv"), ["iter", "loss"],
                                       [(i, float(v)) for i, v in enumerate(res.history)]))
        enc = CV.with_calibration(enc, CV.calibrate(enc, ds.x_t, _basin_a_samples(ds)))
        outputs.append(IO.save_json(run.path("models", "encoder.json"), CV.encoder_to_dict(enc)))
    run.manifest("models", "train", [run.path("data", "pairs.bin")], outputs, **extra)
    _log(f"train: {name} done")
    return enc


def _encoder(run: Run):
    man = run.load_manifest("models", "train", verify=False)
    if not man:
        cmd_train(run)
        man = run.load_manifest("models", "train", verify=False)
    cal = run.load_manifest("models", "calibrate", verify=False)
    expected = (cal or man)["outputs"]["models/encoder.json"]
    try:
        IO.verify_checksum(run.path("models", "encoder.json"), expected)
    except ChecksumMismatch as exc:
        raise ChecksumMismatch(f"refusing to use encoder: {exc}") from exc
    return CV.encoder_from_dict(IO.load_json(run.path("models", "encoder.json")))


def cmd_calibrate(run: Run):
    enc = _encoder(run)
    ds = _pairs(run)
    enc = CV.with_calibration(enc, CV.calibrate(enc, ds.x_t, _basin_a_samples(ds)))
    p = IO.save_json(run.path("models", "encoder.json"), CV.encoder_to_dict(enc))
    run.manifest("models", "calibrate", [run.path("data", "pairs.bin")], [p], calibration=enc.calibration.to_dict())
    return enc


def _projection(run: Run):
    pc = run.cfg["projection"]
    p = run.path("data", "projection.trj")
    man = run.load_manifest("data", "projection")
    if man:
        return IO.load_trajectory(p)
    oc = E.OpesConfig(pace=pc["pace"], sigma=pc["sigma"], barrier=pc["barrier"], beta=run.beta,
                      record_stride=pc["record_stride"], total_steps=pc["total_steps"],
                      seed=run.cfg["seed"] + pc["seed_offset"])
    tr, _ = E.run_opes(run.system, ReferenceCv(run.system), run.langevin, oc)
    IO.save_trajectory(p, tr)
    run.manifest("data", "projection", [], [p])
    return tr


def cmd_project(run: Run):
    from scipy.stats import spearmanr

    enc = _encoder(run)
    tr = _projection(run)
    s = CV.encode(enc, tr.frames)
    ref = reference_coordinate(run.system, tr.frames)[0]
    outs = [IO.save_csv(run.path("report", "projection.csv"), ["frame", "reference", "cv"],
                        [(i, float(a), float(b)) for i, (a, b) in enumerate(zip(ref, s))])]
    land = A.cv_landscape(enc, run.system)
    outs.append(IO.save_csv(run.path("report", "landscape.csv"), land.columns, land.data.tolist()))
    if len(land.columns) == 3:
        svg = plots.line_plot([("cv", land.data[:, 0], land.data[:, 1])], "CV landscape", land.columns[0], "CV")
    else:
        xs, ys = np.unique(land.data[:, 0]), np.unique(land.data[:, 1])
        svg = plots.heatmap(xs, ys, land.data[:, 2].reshape(len(xs), len(ys)), "CV landscape")
    outs.append(IO.atomic_write_text(run.path("report", "landscape.svg"), svg))
    order, vals = CV.sensitivity(enc, tr.frames)
    outs.append(IO.save_csv(run.path("report", "sensitivity.csv"), ["feature", "mean_abs_grad"],
                            [(int(i), float(v)) for i, v in zip(order, vals)]))
    rho = float(spearmanr(s, ref)[0])
    outs.append(IO.save_json(run.path("report", "project.json"), {"spearman_vs_reference": rho,
                                                                  "n_frames": tr.n_frames}))
    run.manifest("report", "project", [run.path("models", "encoder.json"), run.path("data", "projection.trj")], outs)
    _log(f"project: Spearman vs reference coordinate {rho:.3f}")
    return rho


def _cv(run: Run, section: str):
    return ReferenceCv(run.system) if run.cfg[section]["cv"] == "reference" else _encoder(run)


def cmd_smd(run: Run):
    sc = run.cfg["smd"]
    cv = _cv(run, "smd")
    a, b = basin_minimum(run.system, "A"), basin_minimum(run.system, "B")
    s0, s1 = (float(v) for v in cv.value_and_grad(np.stack([a, b]))[0])
    seed = run.cfg["seed"]
    inits = E.thermalized_starts(run.system, run.langevin, sc["n_replicas"], sc["equilibration_steps"], seed)
    outs = []

    def batch(k, tag):
        cfg = E.SmdConfig(k, sc["horizon_steps"], s0, s1, sc["n_replicas"], seed, sc["record_stride"],
                          sc["equilibration_steps"])
        trajs = E.run_smd(run.system, cv, run.langevin, cfg, inits=inits)
        for i, tr in enumerate(trajs):
            outs.append(IO.save_trajectory(run.path("smd", tag, f"replica_{i:03d}.trj"), tr))
        return trajs

    base = batch(0.0, "k0")
    cap = max(float(np.max(t.annotations["energy"])) for t in base) + sc["energy_margin"] / run.beta
    rows = []
    for k in sc["k"]:
        m = A.path_metrics(batch(k, f"k{k:g}"), run.system, b, sc["hit_threshold"])
        under = m.ets_mean is not None and m.ets_mean <= cap
        rows.append({"k": k, "thp_percent": m.thp_percent, "rmsd_mean": m.rmsd_mean, "ets_mean": m.ets_mean,
                     "ets_std": m.ets_std, "under_cap": under})
    eligible = [r for r in rows if r["under_cap"]]
    best = max(eligible, key=lambda r: (r["thp_percent"], -r["ets_mean"])) if eligible else None
    table = [(r["k"], r["thp_percent"], r["rmsd_mean"], r["ets_mean"], r["ets_std"], r["under_cap"]) for r in rows]
    if best:
        table.append(("best:" + f"{best['k']:g}", best["thp_percent"], best["rmsd_mean"], best["ets_mean"],
                      best["ets_std"], True))
    else:
        table.append(("best:none", "", "", "", "", False))
    outs.append(IO.save_csv(run.path("smd", "summary.csv"),
                            ["k", "thp_percent", "rmsd_mean", "ets_mean", "ets_std", "under_cap"], table))
    outs.append(IO.save_json(run.path("smd", "metrics.json"),
                             {"schema_version": A.METRICS_SCHEMA, "energy_cap": cap, "s_initial": s0,
                              "s_target": s1, "rows": rows, "best": best, "cv": sc["cv"]}))
    run.manifest("smd", "smd", [], outs, n_replicas=sc["n_replicas"])
    _log(f"smd: best {best}")
    return rows, best, cap


def _opes_seeds(run: Run):
    return [run.cfg["seed"] + i for i in range(run.cfg["opes"]["n_seeds"])]


def _basin_fn(run: Run):
    return lambda X: basin_coordinate(run.system, X)


def cmd_opes(run: Run):
    oc = run.cfg["opes"]
    cv = _cv(run, "opes")
    if oc["pace"] > oc["total_steps"]:
        _log("warning: opes.pace exceeds opes.total_steps; no deposits will be made (unbiased run)")
    ref_df = A.reference_delta_f(run.system, run.beta)
    rows, outs = [], []
    for seed in _opes_seeds(run):
        cfg = E.OpesConfig(pace=oc["pace"], sigma=oc["sigma"], barrier=oc["barrier"], gamma=oc["gamma"],
                           beta=run.beta, record_stride=oc["record_stride"], total_steps=oc["total_steps"], seed=seed)
        tr, state = E.run_opes(run.system, cv, run.langevin, cfg)
        d = run.path("opes", f"seed_{seed}")
        outs.append(IO.save_trajectory(d / "trajectory.trj", tr))
        steps = np.arange(tr.n_frames) * tr.record_stride
        nk = np.minimum(steps // cfg.pace, state.n_deposits)
        outs.append(IO.save_csv(d / "bias_log.csv", ["step", "s", "V", "n_kernels"],
                                [(int(a), float(b), float(c), int(k)) for a, b, c, k in
                                 zip(steps, tr.annotations["cv"], tr.annotations["bias"], nk)]))
        outs.append(IO.save_csv(d / "kernels.csv", ["center", "weight"], state.kernels))
        try:
            df = A.delta_f(tr, run.beta, run.system.threshold, _basin_fn(run), oc["burn_in_fraction"])
        except EmptyDatasetError:
            _log(f"warning: seed {seed} never visited both basins; Delta F is undefined")
            df = None
        rows.append({"seed": seed, "delta_f": df, "n_kernels": state.n_deposits})
    outs.append(IO.save_json(run.path("opes", "summary.json"),
                             {"reference_delta_f": ref_df, "runs": rows, "cv": oc["cv"]}))
    run.manifest("opes", "opes", [], outs)
    _log("opes: " + ", ".join(f"seed {r['seed']}: dF={_fmt(r['delta_f'])}" for r in rows) + f" (ref {ref_df:.3f})")
    return rows, ref_df


def cmd_fes(run: Run):
    oc = run.cfg["opes"]
    man = run.load_manifest("opes", "opes")
    if not man:
        cmd_opes(run)
    ref_df = A.reference_delta_f(run.system, run.beta)
    outs = []
    for seed in _opes_seeds(run):
        d = run.path("opes", f"seed_{seed}")
        tr = IO.load_trajectory(d / "trajectory.trj")
        fes = A.reweighted_fes(tr, None, run.beta, oc["n_bins"], oc["burn_in_fraction"])
        outs.append(IO.save_csv(d / "fes.csv", ["center", "free_energy", "count", "ess"],
                                [(float(c), float(f), int(n), float(e)) for c, f, n, e in
                                 zip(fes.centers, fes.free_energy, fes.counts, fes.ess)]))
        outs.append(IO.atomic_write_text(d / "fes.svg", plots.line_plot(
            [("F", fes.centers, fes.free_energy)], f"reweighted FES (seed {seed})", "CV", "F / kT")))
        try:
            ser = A.delta_f_series(tr, run.beta, oc["burn_in_fraction"], oc["checkpoint_stride"], _basin_fn(run),
                                   run.system.threshold, ref_df)
        except EmptyDatasetError:
            _log(f"warning: seed {seed} never visited both basins; no Delta F series")
            continue
        outs.append(IO.save_csv(d / "delta_f_series.csv", ["step", "delta_f"],
                                [(int(a), float(b)) for a, b in zip(ser.steps, ser.values)]))
        outs.append(IO.atomic_write_text(d / "delta_f_series.svg", plots.line_plot(
            [("dF", ser.steps, ser.values), ("reference", ser.steps, np.full(len(ser.steps), ref_df))],
            f"Delta F convergence (seed {seed})", "step", "Delta F")))
    run.manifest("opes", "fes", [run.path(r) for r in sorted(man.get("outputs", {}))] if man else [], outs)
    return outs


def _fmt(v, spec=".3f"):
    return "n/a" if v is None else format(v, spec)


def _mean_std(vals):
    vals = np.asarray([v for v in vals if v is not None], dtype=float)
    if len(vals) == 0:
        return None, None
    return float(vals.mean()), float(vals.std(ddof=1)) if len(vals) > 1 else 0.0


def cmd_report(run: Run):
    doc = {"model": run.cfg["model"]["name"], "config_hash": run.hash}
    lines = ["# Summary", ""]
    inputs = []
    if run.path("opes", "summary.json").exists():
        run.load_manifest("opes", "opes")
        inputs.append(run.path("opes", "summary.json"))
        op = IO.load_json(run.path("opes", "summary.json"))
        mean, std = _mean_std([r["delta_f"] for r in op["runs"]])
        doc["opes"] = {"delta_f_mean": mean, "delta_f_std": std, "reference": op["reference_delta_f"],
                       "n_seeds": len(op["runs"])}
        lines += ["| CV | Delta F (kT) | reference (kT) | seeds |", "|---|---|---|---|",
                  f"| {op['cv']} | {_fmt(mean, '.2f')} ± {_fmt(std, '.2f')} | {op['reference_delta_f']:.2f} | {len(op['runs'])} |", ""]
    if run.path("smd", "metrics.json").exists():
        run.load_manifest("smd", "smd")
        inputs.append(run.path("smd", "metrics.json"))
        sm = IO.load_json(run.path("smd", "metrics.json"))
        doc["smd"] = {"best": sm["best"], "energy_cap": sm["energy_cap"]}
        lines += ["| CV | k | RMSD | THP (%) | E_TS |", "|---|---|---|---|---|"]
        b = sm["best"]
        if b:
            lines.append(f"| {sm['cv']} | {b['k']:g} | {b['rmsd_mean']:.3f} | {b['thp_percent']:.2f} | "
                         f"{b['ets_mean']:.2f} ± {b['ets_std']:.2f} |")
        else:
            lines.append(f"| {sm['cv']} | - | - | - | no k under the energy cap |")
        lines.append("")
    if run.path("report", "project.json").exists():
        doc["project"] = IO.load_json(run.path("report", "project.json"))
    outs = [IO.save_json(run.path("report", "summary.json"), doc),
            IO.atomic_write_text(run.path("report", "tables.md"), "\n".join(lines) + "\n")]
    run.manifest("report", "report", inputs, outs)
    print("\n".join(lines))
    return doc


COMMANDS = {
    "simulate": cmd_simulate,
    "make-pairs": cmd_make_pairs,
    "train": cmd_train,
    "calibrate": cmd_calibrate,
    "project": cmd_project,
    "smd": cmd_smd,
    "opes": cmd_opes,
    "fes": cmd_fes,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="tlcv", description=__doc__.splitlines()[0])
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("--config", required=True, help="TOML run configuration")
    ap.add_argument("--seed", type=int, default=None, help="global seed (overrides the config)")
    ap.add_argument("--out", default="tlcv-out", help="output directory")
    ap.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                    help="override a config key, e.g. model.lam=0 (repeatable)")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = C.load(args.config, args.override, args.seed)
        run = Run(cfg, Path(args.out))
        with _Lock(run.out):
            COMMANDS[args.command](run)
    except (ConfigError, ChecksumMismatch, ContractViolation) as exc:
        _log(f"error: {exc}")
        return EXIT_CONFIG
    except _NUMERIC as exc:
        _log(f"numerical failure: {exc}")
        return EXIT_NUMERIC
    except (EmptyDatasetError, TlcError) as exc:
        _log(f"error: {exc}")
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
