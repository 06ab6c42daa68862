"""Command line entry point: ``pointanom {gen,detect,eval,bench}``.

Exit codes: 0 success, 2 configuration error, 3 data error, 1 anything
else.  Diagnostics go to stderr; ``eval`` prints its metrics to stdout.

Configuration files are ``key = value`` text (see :mod:`pointanom.config`).
Command line flags override file values.

Bench configuration keys
    ``methods``   comma list of detector names (required)
    ``clouds``    comma list of ``cloud_path:truth_path`` items, or
    ``seeds``     comma list of seeds for synthetic samples built from the
                  synthetic keys below (both may be given)
    ``pooled``    aggregate summed counts instead of averaging clouds
    ``output``    report path (``-o`` overrides)
    ``<method>.<key>``  a run-config value for one method only

Synthetic keys (``gen`` config and bench)
    ``surface n spacing noise defects height width radius seed``; ``defects``
    is a count of random defects, ``height``/``width`` are in grid spacings.
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import io
from .config import ConfigError, RunConfig, parse_pairs, read_pairs
from .detectors import detect
from .evaluation import METRIC_KEYS, Method, benchmark, confusion, metrics
from .synth import SURFACES, SynthSpec, make_sample, random_defects

SYNTH_KEYS = {"surface": str, "n": int, "spacing": float, "noise": float, "defects": int,
              "height": float, "width": float, "radius": float, "seed": int}
SYNTH_DEFAULTS = {"surface": "plane", "n": 30, "spacing": 1.0, "noise": 0.0, "defects": 0,
                  "height": 2.0, "width": 1.0, "radius": None, "seed": 0}
RUN_FLAGS = ("k", "radius", "normal_k", "orient", "bins", "threshold_rule", "threshold_value",
             "lam", "lam_ratio", "eps", "max_fraction", "max_outer", "max_inner", "tol", "delta",
             "sigma0", "sigma1", "beta_s", "beta_d", "pi", "em_max_iter", "seed")


def _err(msg: str) -> None:
    print(f"pointanom: {msg}", file=sys.stderr)


def _read_config(path) -> dict:
    try:
        with open(path) as fh:
            return read_pairs(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None


def synth_spec(values: dict) -> SynthSpec:
    """SynthSpec from the synthetic keys (strings or typed values)."""
    unknown = sorted(set(values) - set(SYNTH_KEYS))
    if unknown:
        raise ConfigError(f"unknown synthetic keys: {', '.join(unknown)}")
    v = dict(SYNTH_DEFAULTS)
    for key, raw in values.items():
        if raw is None or (isinstance(raw, str) and raw.lower() == "none"):
            v[key] = None if key == "radius" else SYNTH_DEFAULTS[key]
            continue
        try:
            v[key] = SYNTH_KEYS[key](raw)
        except ValueError:
            raise ConfigError(f"invalid value for {key}: {raw!r}") from None
    if v["surface"] not in SURFACES:
        raise ConfigError(f"surface must be one of {SURFACES}")
    if v["defects"] < 0 or v["n"] < 2:
        raise ConfigError("defects must be >= 0 and n >= 2")
    try:
        defects = random_defects(v["n"], v["spacing"], v["defects"], v["seed"],
                                 v["height"], v["width"]) if v["defects"] else ()
        return SynthSpec(surface=v["surface"], n=v["n"], spacing=v["spacing"], noise=v["noise"],
                         defects=defects, seed=v["seed"], radius=v["radius"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _cmd_gen(args) -> int:
    values = _read_config(args.config) if args.config else {}
    for key in SYNTH_KEYS:
        flag = getattr(args, key, None)
        if flag is not None:
            values[key] = flag
    spec = synth_spec(values)
    cloud, truth = make_sample(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    io.write_xyz(out / "cloud.xyz", cloud)
    io.write_labels(out / "truth.txt", truth)
    with open(out / "spec.json", "w") as fh:
        json.dump(spec.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    _err(f"wrote {len(cloud)} points ({int(truth.sum())} anomalous) to {out}")
    return 0


def run_config(args) -> RunConfig:
    pairs = _read_config(args.config) if args.config else {}
    for item in args.set or ():
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        pairs[key.strip()] = value.strip()
    for key in RUN_FLAGS:
        flag = getattr(args, key, None)
        if flag is not None:
            pairs[key] = flag
    if args.method is not None:
        pairs["method"] = args.method
    if "viewpoint" in pairs and not isinstance(pairs["viewpoint"], str):
        pairs["viewpoint"] = ",".join(map(str, pairs["viewpoint"]))
    return parse_pairs(pairs)


def _cmd_detect(args) -> int:
    cfg = run_config(args)
    cloud = io.read_cloud(args.input, args.format)
    result = detect(cloud, cfg)
    io.write_labels(args.out, result.labels)
    if args.ply:
        io.write_labeled_ply(args.ply, cloud, labels=result.labels)
    if args.scores:
        io.write_scores(args.scores, result.scores)
    if args.trace:
        if cfg.method == "sgrade":
            io.write_trace(args.trace, result.info["objective"], "objective")
        elif cfg.method == "lvi":
            io.write_trace(args.trace, result.info["bound"], "bound")
        else:
            _err("fpfh has no iterative trace; --trace ignored")
    _err(f"{cfg.method}: {int(result.labels.sum())} of {len(cloud)} points flagged")
    return 0


def _report(pred, truth) -> dict:
    c = confusion(pred, truth)
    m = metrics(c)
    return {**{k: getattr(m, k) for k in METRIC_KEYS}, "n_points": c.n, "confusion": asdict(c)}


def _cmd_eval(args) -> int:
    truth = io.read_labels(args.truth)
    pred = io.read_labels(args.pred, len(truth))
    print(json.dumps(_report(pred, truth), indent=2, sort_keys=True))
    return 0


def _config_dict(cfg: RunConfig) -> dict:
    d = {f.name: getattr(cfg, f.name) for f in fields(RunConfig)}
    d["viewpoint"] = list(d["viewpoint"])
    return d


def _bench_dataset(pairs: dict, base_dir: Path) -> list:
    data = []
    for item in filter(None, (s.strip() for s in pairs.pop("clouds", "").split(","))):
        if ":" not in item:
            raise ConfigError(f"clouds entries must be cloud:truth, got {item!r}")
        cpath, tpath = (base_dir / p for p in item.split(":", 1))
        cloud = io.read_cloud(cpath)
        data.append((str(item.split(":", 1)[0]), cloud, io.read_labels(tpath, len(cloud))))
    seeds = pairs.pop("seeds", "")
    synth = {k: pairs.pop(k) for k in list(pairs) if k in SYNTH_KEYS}
    for s in filter(None, (x.strip() for x in seeds.split(","))):
        spec = synth_spec({**synth, "seed": s})
        cloud, truth = make_sample(spec)
        data.append((f"synth-{spec.surface}-seed{spec.seed}", cloud, truth))
    if synth and not seeds:
        raise ConfigError("synthetic keys given without seeds")
    if not data:
        raise ConfigError("bench config lists no clouds and no seeds")
    return data


def _method(name: str, cfg: RunConfig) -> Method:
    def run(cloud):
        r = detect(cloud, cfg)
        return r.labels, r.timings
    return Method(name, run, _config_dict(cfg))


def _cmd_bench(args) -> int:
    pairs = _read_config(args.config)
    names = [m.strip() for m in pairs.pop("methods", "").split(",") if m.strip()]
    if not names:
        raise ConfigError("bench config needs methods = name[, name...]")
    pooled = pairs.pop("pooled", "false").lower() in ("1", "true", "yes", "on")
    output = args.output or pairs.pop("output", None)
    per_method = {}
    for key in [k for k in pairs if "." in k]:
        m, sub = key.split(".", 1)
        if m not in names:
            raise ConfigError(f"override {key} names a method not in methods")
        per_method.setdefault(m, {})[sub] = pairs.pop(key)
    shared = {k: pairs.pop(k) for k in list(pairs) if k not in SYNTH_KEYS and k not in ("clouds", "seeds")}
    methods = [_method(m, parse_pairs({**shared, **per_method.get(m, {}), "method": m})) for m in names]
    dataset = _bench_dataset(pairs, Path(args.config).resolve().parent)
    report = benchmark(methods, dataset, pooled=pooled)
    text = json.dumps(report, indent=2, sort_keys=True, default=_json_default) + "\n"
    if output:
        Path(output).write_text(text)
    else:
        sys.stdout.write(text)
    failed = sum(a["clouds_failed"] for a in report["aggregates"].values())
    if failed:
        _err(f"{failed} method/cloud runs failed; see report rows")
    return 0


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pointanom", description="single-sample point cloud anomaly detection")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic labeled cloud")
    g.add_argument("--config")
    g.add_argument("--surface", choices=SURFACES)
    g.add_argument("--n", type=int)
    g.add_argument("--spacing", type=float)
    g.add_argument("--noise", type=float)
    g.add_argument("--defects", type=int, help="number of random defects")
    g.add_argument("--height", type=float, help="defect height in grid spacings")
    g.add_argument("--width", type=float, help="defect width in grid spacings")
    g.add_argument("--radius", type=float, help="sphere_cap radius")
    g.add_argument("--seed", type=int)
    g.add_argument("--out", required=True, help="output directory")
    g.set_defaults(func=_cmd_gen)

    d = sub.add_parser("detect", help="label the points of one cloud")
    d.add_argument("--method", choices=("fpfh", "sgrade", "lvi"))
    d.add_argument("--in", dest="input", required=True)
    d.add_argument("--format", choices=("xyz", "ply"))
    d.add_argument("--out", required=True, help="label file")
    d.add_argument("--config")
    d.add_argument("--ply", help="colored PLY output")
    d.add_argument("--scores", help="score CSV output")
    d.add_argument("--trace", help="objective or bound trace CSV")
    d.add_argument("--set", action="append", metavar="KEY=VALUE", help="any run-config key")
    for key in RUN_FLAGS:
        d.add_argument("--" + key.replace("_", "-"), dest=key)
    d.set_defaults(func=_cmd_detect)

    e = sub.add_parser("eval", help="metrics of predicted against true labels")
    e.add_argument("--pred", required=True)
    e.add_argument("--truth", required=True)
    e.set_defaults(func=_cmd_eval)

    b = sub.add_parser("bench", help="methods x clouds benchmark report")
    b.add_argument("--config", required=True)
    b.add_argument("-o", "--output")
    b.set_defaults(func=_cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except ConfigError as exc:
        _err(f"config error: {exc}")
        return 2
    except (ValueError, OSError) as exc:
        _err(f"data error: {exc}")
        return 3


if __name__ == "__main__":
    sys.exit(main())
