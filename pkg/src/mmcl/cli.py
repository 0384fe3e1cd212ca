"""Command-line entry point.

Usage::

    mmcl SUBCOMMAND [--config PATH] [--seed U64] [--out DIR] [--loss NAME]
                    [--sweep KEY=v1,v2,...] [--paired]

Subcommands: ``eval-loss``, ``optimize``, ``train-surrogate``, ``gradcheck``,
``metrics``, ``schema``.

The config file is INI-style (``[section]`` then ``key = value``); see
``mmcl schema`` for every section, key and default. Unknown sections or keys
are rejected before anything runs. Command-line flags override the file.

Outputs go to ``--out`` (default ``mmcl_out``):

* ``eval-loss``       -> ``eval_loss.json``
* ``optimize``        -> ``trajectory.csv`` + ``summary.json``
* ``train-surrogate`` -> ``trace.csv`` + ``summary.json``; with ``--paired``
  ``trace_mmcl.csv`` (configured target layers) and ``trace_baseline.csv``
  (no target layers) on identical seeds
* ``gradcheck``       -> ``gradcheck.json``
* ``metrics``         -> ``metrics.json``

With ``--sweep`` every grid point writes into its own subdirectory named
``key=value[,key=value...]`` and a ``sweep.json`` index is written at the top.
Reals are written with 10 significant digits, files are UTF-8 with LF newlines.

Exit status: 0 on success, 1 if a gradient check failed or a run diverged,
2 on usage, config or input errors.
"""

import argparse
import configparser
import itertools
import json
import os
import sys

import numpy as np

from .errors import ConfigurationError, MMCLError, NonFiniteLossError, QueryFileError
from .gradcheck import verify_gradient
from .losses import LOSSES, LossConfig, compute_loss
from .metrics import metrics_report
from .optimize import TRAJECTORY_COLUMNS, collapsed_queries, optimize_queries, random_queries
from .partition import partition_queries
from .seeding import MASK64, STREAMS, stream_rng, sub_seed
from .surrogate import TRACE_COLUMNS, SceneParams, TrainConfig, run_training

FLOAT_FORMAT = ".10g"
COMMANDS = ("eval-loss", "optimize", "train-surrogate", "gradcheck", "metrics", "schema")
INITS = ("random", "collapsed")


# ---------------------------------------------------------------- value parsers

def _int(s):
    return int(str(s).strip())


def _float(s):
    return float(str(s).strip())


def _bool(s):
    v = str(s).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _str(s):
    return str(s).strip()


def _names(s):
    """Comma-separated loss names."""
    out = tuple(n.strip() for n in str(s).split(",") if n.strip())
    if not out:
        raise ValueError("empty loss list")
    return out


def _layers(s):
    """Target layers: ``none``/empty, or integers separated by spaces or ``+``."""
    v = str(s).strip().lower()
    if v in ("", "none"):
        return ()
    return tuple(sorted({int(t) for t in v.replace("+", " ").split()}))


def _seed(s):
    v = int(str(s).strip())
    if not 0 <= v <= MASK64:
        raise ValueError(f"seed must be an unsigned 64-bit integer, got {v}")
    return v


# section -> key -> (parser, default). Defaults are given as config-file text.
SCHEMA = {
    "run": {
        "seed": (_seed, "0"),
        "out": (_str, "mmcl_out"),
    },
    "partition": {
        "queries": (_int, "30"),
        "classes": (_int, "5"),
        "dim": (_int, "16"),
    },
    "loss": {
        "names": (_names, ",".join(LOSSES)),
        "margin": (_float, "0.01"),
        "gamma": (_float, "1.0"),
        "eta": (_float, "0.5"),
        "alpha": (_float, "0.25"),
        "tau": (_float, "0.5"),
        "temperature": (_float, "0.1"),
        "eps_clamp": (_float, "1e-07"),
    },
    "input": {
        "queries_file": (_str, ""),
        "init": (_str, "random"),
    },
    "optimize": {
        "loss": (_str, "mmcl"),
        "iterations": (_int, "1000"),
        "lr": (_float, "0.01"),
        "optimizer": (_str, "adam"),
    },
    "train": {
        "contrastive_loss": (_str, "mmcl"),
        "target_layers": (_layers, "0"),
        "layers": (_int, "3"),
        "epochs": (_int, "50"),
        "learning_rate": (_float, "0.01"),
        "lr_schedule": (_str, "cosine"),
        "scenes_per_epoch": (_int, "200"),
        "eval_scenes": (_int, "100"),
        "optimizer": (_str, "adam"),
        "no_object_weight": (_float, "1.0"),
        "box_weight": (_float, "5.0"),
        "contrastive_through_layers": (_bool, "true"),
        "init_scale": (_float, "0.1"),
        "max_objects": (_int, "4"),
        "overlap_prob": (_float, "0.5"),
        "noise": (_float, "0.1"),
    },
    "gradcheck": {
        "trials": (_int, "50"),
        "tolerance": (_float, "1e-05"),
        "step": (_float, "1e-05"),
    },
}

OUTPUT_SCHEMA = {
    "eval_loss.json": ["seed", "queries", "dim", "classes", "group_sizes", "losses"],
    "eval_loss.json:losses.*": ["value", "gradient_norm", "gradient_max_abs", "warnings"],
    "trajectory.csv": list(TRAJECTORY_COLUMNS),
    "optimize/summary.json": ["seed", "loss", "init", "iterations", "initial_homogeneity",
                              "final_homogeneity", "final_loss",
                              "final_interclass_similarity", "final_margin_satisfaction"],
    "trace.csv": list(TRACE_COLUMNS),
    "train-surrogate/summary.json": ["seed", "paired", "runs"],
    "train-surrogate/summary.json:runs.*": [
        "target_layers", "final_group_class_consistency",
        "final_fixed_group_class_consistency", "final_detection_accuracy",
        "final_homogeneity", "final_base_loss", "group_class_consistency_curve",
        "detection_accuracy_curve"],
    "gradcheck.json": ["seed", "all_passed", "reports"],
    "gradcheck.json:reports[]": ["loss", "trials", "tolerance", "max_rel_error",
                                 "max_abs_error", "worst_coordinate", "boundary_resamples",
                                 "passed"],
    "metrics.json": ["homogeneity", "per_class_homogeneity", "inter_class_mean_sim",
                     "margin_satisfied_fraction", "group_class_consistency"],
    "sweep.json": ["sweep", "points"],
}


# ---------------------------------------------------------------- config

def default_config():
    return {sec: {k: parse(text) for k, (parse, text) in keys.items()}
            for sec, keys in SCHEMA.items()}


def _set(cfg, section, key, text):
    if section not in SCHEMA:
        raise ConfigurationError(f"unknown config section [{section}]")
    if key not in SCHEMA[section]:
        raise ConfigurationError(f"unknown key {key!r} in [{section}]")
    try:
        cfg[section][key] = SCHEMA[section][key][0](text)
    except ValueError as exc:
        raise ConfigurationError(f"[{section}] {key}: {exc}") from None


def load_config(path=None):
    """Defaults overlaid with the INI file at ``path``; unknown entries raise."""
    cfg = default_config()
    if path is None:
        return cfg
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
    parser.optionxform = str
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc.strerror}") from None
    except configparser.Error as exc:
        raise ConfigurationError(f"malformed config {path}: {exc}") from None
    for section in parser.sections():
        for key, text in parser.items(section):
            _set(cfg, section, key, text)
    qf = cfg["input"]["queries_file"]
    if qf and not os.path.isabs(qf):
        # relative paths are read relative to the config file
        cfg["input"]["queries_file"] = os.path.join(os.path.dirname(os.path.abspath(path)), qf)
    return cfg


def resolve_key(key):
    """``section.key`` or a bare key that names exactly one section's entry."""
    if "." in key:
        section, name = key.split(".", 1)
        if section not in SCHEMA or name not in SCHEMA[section]:
            raise ConfigurationError(f"unknown sweep key {key!r}")
        return section, name
    hits = [sec for sec, keys in SCHEMA.items() if key in keys]
    if len(hits) != 1:
        what = "unknown" if not hits else "ambiguous"
        raise ConfigurationError(f"{what} sweep key {key!r}; use section.key")
    return hits[0], key


def parse_sweep(specs):
    """``["KEY=v1,v2", ...]`` -> list of ``((section, key), [text values])``."""
    grid = []
    for item in specs or ():
        if "=" not in item:
            raise ConfigurationError(f"sweep must look like KEY=v1,v2,..., got {item!r}")
        key, values = item.split("=", 1)
        vals = [v.strip() for v in values.split(",")]
        if not vals or any(v == "" for v in vals):
            raise ConfigurationError(f"empty value in sweep {item!r}")
        grid.append((resolve_key(key.strip()), vals))
    return grid


def loss_config(cfg):
    c = cfg["loss"]
    return LossConfig(margin=c["margin"], gamma=c["gamma"], eta=c["eta"], alpha=c["alpha"],
                      tau=c["tau"], temperature=c["temperature"], eps_clamp=c["eps_clamp"])


def _check_loss(name):
    if name not in LOSSES:
        raise ConfigurationError(f"unknown loss {name!r}; choose from {', '.join(LOSSES)}")
    return name


def train_config(cfg, seed, target_layers=None):
    t = cfg["train"]
    return TrainConfig(
        n_queries=cfg["partition"]["queries"], n_layers=t["layers"],
        target_layers=t["target_layers"] if target_layers is None else target_layers,
        epochs=t["epochs"], learning_rate=t["learning_rate"], lr_schedule=t["lr_schedule"],
        loss_cfg=loss_config(cfg), contrastive_loss=t["contrastive_loss"], seed=seed,
        scenes_per_epoch=t["scenes_per_epoch"], eval_scenes=t["eval_scenes"],
        optimizer=t["optimizer"], no_object_weight=t["no_object_weight"],
        box_weight=t["box_weight"], contrastive_through_layers=t["contrastive_through_layers"],
        init_scale=t["init_scale"])


def scene_params(cfg):
    t = cfg["train"]
    return SceneParams(classes=cfg["partition"]["classes"], max_objects=t["max_objects"],
                       overlap_prob=t["overlap_prob"], noise=t["noise"],
                       dim=cfg["partition"]["dim"])


def validate(command, cfg):
    """Build every object the command needs so bad values fail before any work."""
    loss_config(cfg)
    part = cfg["partition"]
    partition_queries(part["queries"], part["classes"])
    if part["dim"] < 1:
        raise ConfigurationError("dim must be >= 1")
    if cfg["input"]["init"] not in INITS:
        raise ConfigurationError(f"unknown init {cfg['input']['init']!r}; choose from "
                                 + ", ".join(INITS))
    if command in ("eval-loss", "gradcheck"):
        for n in cfg["loss"]["names"]:
            _check_loss(n)
    if command == "optimize":
        o = cfg["optimize"]
        _check_loss(o["loss"])
        if o["iterations"] < 1:
            raise ConfigurationError("iterations must be >= 1")
        if o["lr"] < 0:
            raise ConfigurationError("lr must be >= 0")
        if o["optimizer"] not in ("sgd", "adam"):
            raise ConfigurationError(f"unknown optimizer {o['optimizer']!r}")
    if command == "train-surrogate":
        train_config(cfg, cfg["run"]["seed"])
        scene_params(cfg)
    if command == "gradcheck":
        g = cfg["gradcheck"]
        if g["trials"] < 1:
            raise ConfigurationError("trials must be >= 1")
        if not 1e-8 <= g["step"] <= 1e-2:
            raise ConfigurationError("step must lie in [1e-8, 1e-2]")
        if g["tolerance"] <= 0:
            raise ConfigurationError("tolerance must be > 0")


# ---------------------------------------------------------------- formatting

def fmt(x):
    return format(float(x), FLOAT_FORMAT)


def _round(obj):
    if isinstance(obj, (bool, np.bool_)) or obj is None or isinstance(obj, str):
        return bool(obj) if isinstance(obj, np.bool_) else obj
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return float(fmt(obj))
    if isinstance(obj, dict):
        return {str(k): _round(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple, np.ndarray)):
        return [_round(v) for v in obj]
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def dumps(obj):
    return json.dumps(_round(obj), indent=2) + "\n"


def _csv_cell(v):
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
        return str(int(v))
    return fmt(v)


def write_text(path, text):
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def write_csv(path, columns, rows):
    lines = [",".join(columns)]
    lines += [",".join(_csv_cell(v) for v in row) for row in rows]
    write_text(path, "\n".join(lines) + "\n")


# ---------------------------------------------------------------- query files

def read_query_file(path):
    """Parse ``N,D`` then N lines of D comma-separated reals.

    Blank lines are not allowed; parse errors report 1-based line and column.
    A relative ``queries_file`` in a config is resolved against the config's
    directory.
    """
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.read().split("\n")
    except OSError as exc:
        raise ConfigurationError(f"cannot read query file {path}: {exc.strerror}") from None
    if lines and lines[-1] == "":
        lines.pop()
    lines = [ln[:-1] if ln.endswith("\r") else ln for ln in lines]
    if not lines:
        raise QueryFileError("missing header 'N,D'", 1, 1)

    def fields(text):
        col = 1
        for tok in text.split(","):
            yield col, tok
            col += len(tok) + 1

    head = list(fields(lines[0]))
    if len(head) != 2:
        raise QueryFileError(f"header must be 'N,D', got {lines[0]!r}", 1, 1)
    dims = []
    for col, tok in head:
        try:
            v = int(tok.strip())
        except ValueError:
            raise QueryFileError(f"expected integer, got {tok!r}", 1, col) from None
        if v < 1:
            raise QueryFileError(f"dimension must be >= 1, got {v}", 1, col)
        dims.append(v)
    n, d = dims
    if len(lines) - 1 != n:
        # point at the first missing or first surplus line
        where = len(lines) + 1 if len(lines) - 1 < n else n + 2
        raise QueryFileError(f"expected {n} data rows, found {len(lines) - 1}", where, 1)
    out = np.empty((n, d))
    for r in range(n):
        lineno = r + 2
        row = list(fields(lines[lineno - 1]))
        if len(row) != d:
            raise QueryFileError(f"expected {d} values, found {len(row)}", lineno, 1)
        for c, (col, tok) in enumerate(row):
            try:
                v = float(tok.strip())
            except ValueError:
                raise QueryFileError(f"not a real number: {tok!r}", lineno, col) from None
            if not np.isfinite(v):
                raise QueryFileError(f"non-finite value {tok.strip()!r}", lineno, col)
            out[r, c] = v
    return out


def write_query_file(path, q):
    q = np.asarray(q, dtype=float)
    lines = [f"{q.shape[0]},{q.shape[1]}"] + [",".join(fmt(v) for v in row) for row in q]
    write_text(path, "\n".join(lines) + "\n")


def input_queries(cfg, seed):
    """The query matrix a command works on: the configured file, or seeded."""
    part = cfg["partition"]
    path = cfg["input"]["queries_file"]
    if path:
        q = read_query_file(path)
        if q.shape[0] != part["queries"]:
            raise ConfigurationError(
                f"{path} has {q.shape[0]} rows but [partition] queries = {part['queries']}")
        return q
    rng = stream_rng(seed, "queries")
    if cfg["input"]["init"] == "collapsed":
        return collapsed_queries(part["queries"], part["dim"], rng)
    return random_queries(part["queries"], part["dim"], rng)


def _partition(cfg):
    return partition_queries(cfg["partition"]["queries"], cfg["partition"]["classes"])


# ---------------------------------------------------------------- commands

def cmd_eval_loss(cfg, seed, out):
    q = input_queries(cfg, seed)
    p = _partition(cfg)
    lc = loss_config(cfg)
    losses = {}
    for name in cfg["loss"]["names"]:
        res = compute_loss(name, q, p, lc)
        losses[name] = {
            "value": res.value,
            "gradient_norm": float(np.linalg.norm(res.gradient)),
            "gradient_max_abs": float(np.max(np.abs(res.gradient))),
            "warnings": list(res.warnings),
        }
    report = {"seed": seed, "queries": q.shape[0], "dim": q.shape[1], "classes": p.classes,
              "group_sizes": list(p.group_sizes), "losses": losses}
    write_text(os.path.join(out, "eval_loss.json"), dumps(report))
    return report, 0


def cmd_optimize(cfg, seed, out):
    o = cfg["optimize"]
    q0 = input_queries(cfg, seed)
    p = _partition(cfg)
    _, rows = optimize_queries(q0, p, loss=o["loss"], cfg=loss_config(cfg),
                               iterations=o["iterations"], lr=o["lr"],
                               optimizer=o["optimizer"])
    write_csv(os.path.join(out, "trajectory.csv"), TRAJECTORY_COLUMNS,
              [r.as_tuple() for r in rows])
    last = rows[-1]
    summary = {
        "seed": seed, "loss": o["loss"],
        "init": "file" if cfg["input"]["queries_file"] else cfg["input"]["init"],
        "iterations": o["iterations"],
        "initial_homogeneity": rows[0].homogeneity,
        "final_homogeneity": last.homogeneity,
        "final_loss": last.loss,
        "final_interclass_similarity": last.interclass_similarity,
        "final_margin_satisfaction": last.margin_satisfaction,
    }
    write_text(os.path.join(out, "summary.json"), dumps(summary))
    return summary, 0


def _run_summary(trace, tc):
    last = trace.records[-1]
    return {
        "target_layers": list(tc.target_layers),
        "final_group_class_consistency": last.group_class_consistency,
        "final_fixed_group_class_consistency": last.fixed_group_class_consistency,
        "final_detection_accuracy": last.detection_accuracy,
        "final_homogeneity": last.homogeneity,
        "final_base_loss": last.base_loss,
        "group_class_consistency_curve": trace.column("group_class_consistency"),
        "detection_accuracy_curve": trace.column("detection_accuracy"),
    }


def cmd_train_surrogate(cfg, seed, out, paired=False):
    sp = scene_params(cfg)
    if paired:
        arms = [("mmcl", train_config(cfg, seed)), ("baseline", train_config(cfg, seed, ()))]
    else:
        arms = [(None, train_config(cfg, seed))]
    runs = {}
    for label, tc in arms:
        trace, _ = run_training(tc, sp)
        fname = "trace.csv" if label is None else f"trace_{label}.csv"
        write_csv(os.path.join(out, fname), TRACE_COLUMNS, trace.rows())
        runs[label or "run"] = _run_summary(trace, tc)
    summary = {"seed": seed, "paired": paired, "runs": runs}
    write_text(os.path.join(out, "summary.json"), dumps(summary))
    return summary, 0


def cmd_gradcheck(cfg, seed, out):
    g = cfg["gradcheck"]
    lc = loss_config(cfg)
    check_seed = sub_seed(seed, STREAMS["gradcheck"])
    reports = [verify_gradient(n, trials=g["trials"], seed=check_seed,
                               tolerance=g["tolerance"], cfg=lc, step=g["step"]).to_dict()
               for n in cfg["loss"]["names"]]
    ok = all(r["passed"] for r in reports)
    result = {"seed": seed, "all_passed": ok, "reports": reports}
    write_text(os.path.join(out, "gradcheck.json"), dumps(result))
    return result, 0 if ok else 1


def cmd_metrics(cfg, seed, out):
    q = input_queries(cfg, seed)
    report = metrics_report(q, _partition(cfg), loss_config(cfg)).to_dict()
    write_text(os.path.join(out, "metrics.json"), dumps(report))
    return report, 0


def schema():
    return {
        "config": {sec: {k: text for k, (_, text) in keys.items()}
                   for sec, keys in SCHEMA.items()},
        "outputs": OUTPUT_SCHEMA,
        "seed_streams": dict(STREAMS),
        "float_format": FLOAT_FORMAT,
        "exit_codes": {"0": "success", "1": "gradient check failed or run diverged",
                       "2": "usage, config or input error"},
    }


RUNNERS = {
    "eval-loss": cmd_eval_loss,
    "optimize": cmd_optimize,
    "gradcheck": cmd_gradcheck,
    "metrics": cmd_metrics,
}


def _point_name(point):
    return ",".join(f"{sec}.{key}={val}" for (sec, key), val in point)


def run(command, cfg, seed, out, paired=False, sweep=()):
    """Run ``command`` once, or once per sweep grid point. Returns ``(result, status)``."""
    def once(c, o):
        validate(command, c)
        if command == "train-surrogate":
            return cmd_train_surrogate(c, seed, o, paired)
        return RUNNERS[command](c, seed, o)

    if not sweep:
        return once(cfg, out)
    keys = [k for k, _ in sweep]
    points = [list(zip(keys, combo)) for combo in itertools.product(*(v for _, v in sweep))]
    configs = []
    for point in points:
        c = {sec: dict(vals) for sec, vals in cfg.items()}
        for (sec, key), text in point:
            _set(c, sec, key, text)
        validate(command, c)
        configs.append(c)
    status = 0
    index = []
    for point, c in zip(points, configs):
        name = _point_name(point)
        result, st = once(c, os.path.join(out, name))
        status = max(status, st)
        index.append({"point": {f"{s}.{k}": v for (s, k), v in point}, "dir": name,
                      "result": result})
    result = {"sweep": [f"{s}.{k}" for s, k in keys], "points": index}
    write_text(os.path.join(out, "sweep.json"), dumps(result))
    return result, status


def build_parser():
    ap = argparse.ArgumentParser(prog="mmcl", description="Min-margin contrastive losses "
                                 "for partitioned query embeddings.")
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", metavar="PATH", help="INI config file")
    ap.add_argument("--seed", metavar="U64", help="root seed (overrides [run] seed)")
    ap.add_argument("--out", metavar="DIR", help="output directory (overrides [run] out)")
    ap.add_argument("--loss", metavar="NAME",
                    help="loss name(s), comma-separated for eval-loss/gradcheck")
    ap.add_argument("--sweep", metavar="KEY=v1,v2,...", action="append",
                    help="grid over a config key; repeat for a product grid")
    ap.add_argument("--paired", action="store_true",
                    help="train-surrogate: also run without contrastive supervision")
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        if args.command == "schema":
            sys.stdout.write(dumps(schema()))
            return 0
        cfg = load_config(args.config)
        if args.seed is not None:
            _set(cfg, "run", "seed", args.seed)
        if args.out is not None:
            _set(cfg, "run", "out", args.out)
        if args.loss is not None:
            if args.command in ("eval-loss", "gradcheck"):
                _set(cfg, "loss", "names", args.loss)
            elif args.command == "optimize":
                _set(cfg, "optimize", "loss", args.loss)
            elif args.command == "train-surrogate":
                _set(cfg, "train", "contrastive_loss", args.loss)
            else:
                raise ConfigurationError(f"--loss does not apply to {args.command}")
        if args.paired and args.command != "train-surrogate":
            raise ConfigurationError("--paired only applies to train-surrogate")
        sweep = parse_sweep(args.sweep)
        result, status = run(args.command, cfg, cfg["run"]["seed"], cfg["run"]["out"],
                             paired=args.paired, sweep=sweep)
    except (ConfigurationError, QueryFileError) as exc:
        print(f"mmcl: error: {exc}", file=sys.stderr)
        return 2
    except NonFiniteLossError as exc:
        print(f"mmcl: run aborted: {exc}", file=sys.stderr)
        return 1
    except MMCLError as exc:
        print(f"mmcl: error: {exc}", file=sys.stderr)
        return 2
    sys.stdout.write(dumps(result))
    return status


if __name__ == "__main__":
    sys.exit(main())
