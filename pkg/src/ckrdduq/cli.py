"""Stage runner: prep, offline, surrogate, online, report, flow-bench."""
from __future__ import annotations

import argparse
import os
import sys
import time

import numpy as np

from . import dduq
from .config import ConfigError, PipelineConfig, load_config
from .dd import PODBasis
from .flows import FlowConfigError, FlowModel, FlowNumericalError, FlowTrainingError
from .io import SampleTable, load_json, save_json
from .nn import load_into, read_checkpoint, save_checkpoint
from .randfield import KLBasis
from .stats import kde_fit, kde_pdf, mixture_benchmark
from .surrogate import CouplingSurrogate, SurrogateError

STAGES = ("prep", "offline", "surrogate", "online", "report", "flow-bench")


class StageError(RuntimeError):
    pass


# -- artifact names ---------------------------------------------------------------


def kl_file(i):
    return f"kl_{i}.txt"


def pod_file(key):
    return f"pod_{key[0]}_{key[1]}.txt"


def table_file(i):
    return f"samples_{i}.txt"


def surrogate_file(key):
    return f"surrogate_{key[0]}_{key[1]}.ckrw"


def flow_file(i):
    return f"flow_{i}.ckrw"


PRODUCER = {"prep.json": "prep", "online.json": "online", "reference.txt": "report"}


def _producer(name: str) -> str:
    for prefix, stage in (("kl_", "prep"), ("pod_", "prep"), ("samples_", "offline"),
                          ("surrogate_", "surrogate"), ("flow_", "online")):
        if name.startswith(prefix):
            return stage
    return PRODUCER.get(name, "?")


def require(out: str, name: str) -> str:
    path = os.path.join(out, name)
    if not os.path.exists(path):
        raise StageError(f"missing prerequisite {path}; run the '{_producer(name)}' stage first")
    return path


# -- persistence of stage products ----------------------------------------------------


def save_prep(out: str, cfg: PipelineConfig, prep: dduq.Prep) -> None:
    dec = cfg.decomposition
    for i in dec.ids:
        np.savetxt(os.path.join(out, kl_file(i)), dec.kl(i).to_table(), fmt="%.17g")
    for key, b in prep.bases.items():
        np.savetxt(os.path.join(out, pod_file(key)), np.vstack([b.mean, b.modes.T]), fmt="%.17g",
                   header=" ".join(f"{v:.17g}" for v in b.singular_values))
    save_json(os.path.join(out, "prep.json"), {
        "proposals": {str(i): {"mean": p.mean, "cov": p.cov} for i, p in prep.proposals.items()},
        "kl_modes": {str(i): dec.kl(i).modes for i in dec.ids},
        "pod_modes": {f"{k[0]}_{k[1]}": b.size for k, b in prep.bases.items()},
        "singular_values": {f"{k[0]}_{k[1]}": b.singular_values for k, b in prep.bases.items()},
    })


def load_prep(out: str, cfg: PipelineConfig) -> dduq.Prep:
    dec = cfg.decomposition
    meta = load_json(require(out, "prep.json"))
    for i in dec.ids:
        dec.set_kl(i, KLBasis.from_table(np.loadtxt(require(out, kl_file(i)), ndmin=2)))
    bases = {}
    for itf in dec.interfaces:
        path = require(out, pod_file(itf.key))
        with open(path) as fh:
            sv = np.array([float(v) for v in fh.readline().lstrip("#").split()])
        arr = np.loadtxt(path, ndmin=2)
        bases[itf.key] = PODBasis(arr[1:].T.copy(), sv, arr[0].copy())
    props = {int(i): dduq.GaussianProposal(np.array(p["mean"]), np.array(p["cov"]))
             for i, p in meta["proposals"].items()}
    return dduq.Prep(bases, props, {}, {})


def load_tables(out: str, cfg: PipelineConfig) -> dict:
    return {i: SampleTable.load(require(out, table_file(i))) for i in cfg.decomposition.ids}


def save_surrogate(path: str, s: CouplingSurrogate) -> None:
    save_checkpoint(path, s.net.parameters(), s.manifest())


def load_surrogate(path: str) -> CouplingSurrogate:
    _, _, meta = read_checkpoint(path)
    s = CouplingSurrogate.from_manifest(meta)
    load_into(path, s.net.parameters())
    return s


def load_flow(path: str) -> FlowModel:
    _, _, meta = read_checkpoint(path)
    model = FlowModel.from_manifest(meta)
    load_into(path, model.parameters())
    return model


# -- stages --------------------------------------------------------------------------------


def stage_prep(cfg, out, seed, workers):
    prep = dduq.prepare(cfg.decomposition, cfg.sampling.n_snap, seed)
    save_prep(out, cfg, prep)


def stage_offline(cfg, out, seed, workers):
    prep = load_prep(out, cfg)
    tables = dduq.run_offline(cfg.decomposition, prep, cfg.sampling.n_off, seed, workers)
    dropped = {}
    for i, t in tables.items():
        t.save(os.path.join(out, table_file(i)))
        dropped[str(i)] = t.dropped
    save_json(os.path.join(out, "offline.json"), {"dropped": dropped, "n_off": cfg.sampling.n_off})


def stage_surrogate(cfg, out, seed, workers):
    tables = load_tables(out, cfg)
    sur_cfg = cfg.surrogate
    sur_cfg.seed = seed
    surs = dduq.fit_surrogates(cfg.decomposition, tables, sur_cfg)
    info = {}
    for key, s in surs.items():
        save_surrogate(os.path.join(out, surrogate_file(key)), s)
        info[f"{key[0]}_{key[1]}"] = {"val_mse": s.val_mse, "flagged": s.flagged, "epochs": len(s.history)}
    save_json(os.path.join(out, "surrogate.json"), info)


def stage_online(cfg, out, seed, workers):
    dec = cfg.decomposition
    prep = load_prep(out, cfg)
    tables = load_tables(out, cfg)
    surs = {itf.key: load_surrogate(require(out, surrogate_file(itf.key))) for itf in dec.interfaces}
    res = dduq.run_online(dec, prep, surs, tables, cfg.sampling.n_on, cfg.flow, seed)
    for i in dec.ids:
        tables[i][f"w_{i}"] = res.weights[i]
        tables[i].save(os.path.join(out, table_file(i)))
        save_checkpoint(os.path.join(out, flow_file(i)), res.flows[i].parameters(), res.flows[i].manifest())
    save_json(os.path.join(out, "online.json"), {
        "indicator_history": res.history, "steps_max": int(res.steps.max()),
        "ess": {str(i): v for i, v in res.ess.items()}, "clamped": {str(i): v for i, v in res.clamped.items()},
        "flow_history": {str(i): h for i, h in res.flow_history.items()},
    })


def stage_report(cfg, out, seed, workers):
    dec = cfg.decomposition
    online = load_json(require(out, "online.json"))
    tables = load_tables(out, cfg)
    ref_path = os.path.join(out, "reference.txt")
    if os.path.exists(ref_path):
        ref_table = SampleTable.load(ref_path)
    else:
        ref = dduq.reference_monte_carlo(dec, cfg.sampling.n_ref, seed, workers)
        ref_table = SampleTable({f"y_{i}": ref["outputs"][i] for i in dec.ids})
        ref_table.save(ref_path)
    report = {"outputs": {}, "ess": {}, "clamped": online["clamped"], "n_off": len(tables[dec.ids[0]]),
              "indicator_history": online["indicator_history"]}
    for i in dec.ids:
        t = tables[i]
        if f"w_{i}" not in t:
            raise StageError(f"{table_file(i)} has no weight column; run the 'online' stage first")
        y, w = t[f"y_{i}"], t[f"w_{i}"]
        mean, var = dduq.weighted_moments(y, w)
        yr = ref_table[f"y_{i}"]
        rmean, rvar = float(yr.mean()), float(yr.var())
        eps, eta = dduq.error_metrics(mean, var, rmean, rvar)
        entry = {"mean": mean, "var": var, "ref_mean": rmean, "ref_var": rvar, "eps": eps, "eta": eta,
                 "ess": dduq.effective_sample_size(w)}
        if cfg.output.thresholds:
            entry["exceedance"] = {str(a): dduq.exceedance_probability(y, w, a) for a in cfg.output.thresholds}
        report["outputs"][str(i)] = entry
        report["ess"][str(i)] = entry["ess"]
        lo = min(yr.min(), y.min())
        hi = max(yr.max(), y.max())
        grid = np.linspace(lo, hi, cfg.output.pdf_points)
        cols = np.column_stack([grid, kde_pdf(kde_fit(y, w), grid), kde_pdf(kde_fit(yr), grid)])
        np.savetxt(os.path.join(out, f"pdf_{i}.csv"), cols, delimiter=",", fmt="%.10g",
                   header="y,pdf_weighted,pdf_reference", comments="")
    hist = online["indicator_history"]
    np.savetxt(os.path.join(out, "indicator.csv"), np.column_stack([np.arange(1, len(hist) + 1), hist]),
               delimiter=",", fmt="%.10g", header="step,indicator", comments="")
    save_json(os.path.join(out, "report.json"), report)


def stage_flow_bench(cfg, out, seed, workers):
    b = cfg.bench
    rows, summary = [], []
    for c in b.cond_dims:
        r = mixture_benchmark(c, b.n_train, seed, n_val=b.n_val, n_val_epoch=b.n_val_epoch,
                              epochs=b.epochs, batch_size=b.batch_size)
        rows += [(c, e, dc, dk) for e, dc, dk in r.history]
        summary.append({"cond_dim": c, "delta_ckr": r.delta_ckr, "delta_kr": r.delta_kr})
    np.savetxt(os.path.join(out, "flow_bench.csv"), np.array(rows), delimiter=",", fmt="%.10g",
               header="cond_dim,epoch,delta_ckr,delta_kr", comments="")
    save_json(os.path.join(out, "flow_bench.json"), {"n_train": b.n_train, "n_val": b.n_val, "results": summary})


RUNNERS = {"prep": stage_prep, "offline": stage_offline, "surrogate": stage_surrogate,
           "online": stage_online, "report": stage_report, "flow-bench": stage_flow_bench}


def run_stage(config_path: str, stage: str, seed: int | None = None, workers: int = 1, out: str = "out") -> int:
    cfg = load_config(config_path)
    seed = cfg.sampling.seed if seed is None else seed
    os.makedirs(out, exist_ok=True)
    RUNNERS[stage](cfg, out, seed, workers)
    mpath = os.path.join(out, "manifest.json")
    manifest = load_json(mpath) if os.path.exists(mpath) else {"stages": {}}
    manifest["stages"][stage] = {"config_hash": cfg.digest, "seed": seed, "workers": workers,
                                 "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S")}
    save_json(mpath, manifest)
    return 0


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="ckrdduq", description=__doc__)
    ap.add_argument("--config", required=True)
    ap.add_argument("--stage", required=True, choices=STAGES)
    ap.add_argument("--seed", type=int, default=None)
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument("--out", default="out")
    args = ap.parse_args(argv)
    try:
        return run_stage(args.config, args.stage, args.seed, args.workers, args.out)
    except (ConfigError, StageError, dduq.PipelineError, SurrogateError,
            FlowConfigError, FlowNumericalError, FlowTrainingError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
