"""Command-line driver for the data -> train -> prune -> quantize -> simulate pipeline.

Every stage reads the artifacts of the previous ones from ``--out`` and
writes its own, so stages can be rerun or inspected in isolation::

    embedcnn pipeline --config demo --out runs/demo
    embedcnn simulate --config demo --out runs/demo
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import sys
from importlib import resources
from pathlib import Path

from embedcnn import io, pruner, quantizer, socsim
from embedcnn.engine import Diverged, LossWeights, TrainConfig, class_counts, evaluate, train
from embedcnn.graph import GraphError, count_flops, count_params
from embedcnn.models import ArchConfig, build_multitask, deployment_shapes
from embedcnn.taskbench import evaluate_outputs, generate_dataset, load_dataset, save_dataset

log = logging.getLogger("embedcnn")

STAGES = ["gen-data", "train", "prune", "quantize", "schedule", "simulate", "report"]
VERSIONS = ["unpruned", "pruned", "chained", "mixed"]


class CliError(Exception):
    exit_code = 1


class ConfigError(CliError):
    exit_code = 2


class MissingArtifact(CliError):
    exit_code = 3


# exit status per error class; anything unlisted exits 1
EXIT_CODES = {
    ConfigError: 2,
    MissingArtifact: 3,
    socsim.Infeasible: 4,
    pruner.TargetUnreachable: 5,
    pruner.PruneError: 5,
    Diverged: 6,
    quantizer.EmptyCalibSet: 7,
    quantizer.QuantError: 7,
    GraphError: 8,
    io.FormatError: 8,
}


def exit_code_for(exc: BaseException) -> int:
    for cls in type(exc).__mro__:
        if cls in EXIT_CODES:
            return EXIT_CODES[cls]
    return 1


# --------------------------------------------------------------------------
# configuration

DEFAULT_CONFIG = {
    "seed": 0,
    "arch": ArchConfig().to_dict(),
    "data": {"n_train": 96, "n_val": 48, "n_calib": 32},
    "train": {"epochs": 24, "lr": 3e-3, "batch_size": 16},
    "loss_weights": {"w_det": 1.0, "w_seg": 1.0, "w_soil": 1.0},
    "prune": {
        "target_ratio": 0.58,
        "step_fraction": 0.1,
        "finetune_epochs": 2,
        "final_finetune_epochs": 14,
        "criterion": "filternorm",
        "compare_criteria": False,
    },
    "quant": {"bandwidth_gbps": 1.0, "footprint_mb": 14.0},
    "deploy": {"height": 384, "width": 640},
    "hardware": {},
}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def load_config(spec: str | None, seed: int | None = None) -> dict:
    """``spec`` is a JSON path, the name of a bundled config, or None for defaults."""
    cfg: dict = {}
    if spec:
        path = Path(spec)
        # relative references inside a config resolve against the config's own location
        base_dir = path.parent if path.is_file() else resources.files("embedcnn.configs")
        try:
            text = path.read_text() if path.is_file() else base_dir.joinpath(f"{spec}.json").read_text()
        except FileNotFoundError:
            raise ConfigError(f"no config file or bundled config named {spec!r}") from None
        try:
            cfg = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"config is not valid JSON: {e}") from None
        hw = cfg.get("hardware")
        if isinstance(hw, str):
            hw_path = Path(hw) if Path(hw).is_absolute() else base_dir.joinpath(hw)
            if not hw_path.is_file():
                raise ConfigError(f"hardware config {hw} not found")
            cfg["hardware"] = json.loads(hw_path.read_text())
    unknown = set(cfg) - set(DEFAULT_CONFIG)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    cfg = _merge(DEFAULT_CONFIG, cfg)
    if seed is not None:
        cfg["seed"] = int(seed)
    try:
        _arch(cfg), _train_cfg(cfg), _loss_weights(cfg), _hw(cfg)
        pruner.PruneCriterion(cfg["prune"]["criterion"])
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from None
    return cfg


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


def _arch(cfg) -> ArchConfig:
    return ArchConfig.from_dict({**cfg["arch"], "seed": cfg["seed"]})


def _train_cfg(cfg) -> TrainConfig:
    return TrainConfig(**{**cfg["train"], "seed": cfg["seed"], "eval_every": 0})


def _loss_weights(cfg) -> LossWeights:
    return LossWeights(**cfg["loss_weights"])


def _hw(cfg) -> socsim.HardwareConfig:
    return socsim.HardwareConfig.from_dict(cfg["hardware"])


def _deploy(cfg, graph):
    d = cfg["deploy"]
    return deployment_shapes(graph, d["height"], d["width"])


# --------------------------------------------------------------------------
# artifacts


class Workspace:
    def __init__(self, root: str | Path):
        self.root = Path(root)

    def path(self, *parts: str) -> Path:
        p = self.root.joinpath(*parts)
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def need(self, *parts: str) -> Path:
        p = self.root.joinpath(*parts)
        if not p.exists():
            raise MissingArtifact(f"{p} not found; run the stage that produces it first")
        return p

    def write_json(self, obj, *parts: str) -> Path:
        p = self.path(*parts)
        p.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")
        return p

    def read_json(self, *parts: str):
        return json.loads(self.need(*parts).read_text())


def _metrics_dict(m) -> dict | None:
    return None if m is None else m.as_dict()


def stage_gen_data(cfg, ws: Workspace) -> None:
    a, d = cfg["arch"], cfg["data"]
    common = dict(image_size=a["image_size"], n_classes=a["n_classes"], grid=a["grid"], n_soil_classes=a["n_soil_classes"])
    seed = cfg["seed"]
    save_dataset(ws.path("data", "train.npz"), generate_dataset(seed * 3 + 1, d["n_train"], **common))
    save_dataset(ws.path("data", "val.npz"), generate_dataset(seed * 3 + 2, d["n_val"], **common))


def _data(ws: Workspace):
    return load_dataset(ws.need("data", "train.npz")), load_dataset(ws.need("data", "val.npz"))


def stage_train(cfg, ws: Workspace) -> None:
    tr, va = _data(ws)
    graph = build_multitask(_arch(cfg))
    trained, history = train(graph, tr, _train_cfg(cfg), _loss_weights(cfg))
    io.save_graph(trained, ws.path("models", "unpruned.json"))
    history.to_csv(ws.path("train_history.csv"))
    ws.write_json({"metrics": evaluate(trained, va).as_dict(), "flops": count_flops(trained), "params": count_params(trained)}, "models", "unpruned_metrics.json")


def stage_prune(cfg, ws: Workspace) -> None:
    tr, va = _data(ws)
    graph = io.load_graph(ws.need("models", "unpruned.json"))
    p = cfg["prune"]
    target = int(p["target_ratio"] * count_flops(graph))
    criteria = [p["criterion"]]
    if p.get("compare_criteria"):
        criteria += [c.value for c in pruner.PruneCriterion if c.value != p["criterion"]]
    for i, crit in enumerate(criteria):
        sched = pruner.PruneSchedule(
            target_flops=target,
            step_fraction=p["step_fraction"],
            finetune_epochs=p["finetune_epochs"],
            final_finetune_epochs=p["final_finetune_epochs"],
            criterion=crit,
        )
        pruned, trace = pruner.iterative_prune(graph, tr, sched, _train_cfg(cfg), _loss_weights(cfg), va)
        trace.to_csv(ws.path("prune", f"trace_{crit}.csv"))
        if i == 0:
            io.save_graph(pruned, ws.path("models", "pruned.json"))
            ws.path("prune", "masks.json").write_text(json.dumps([json.loads(m.to_json()) for m in trace.masks], indent=1) + "\n")
            ws.write_json(
                {"metrics": _metrics_dict(trace.final_metrics), "flops": count_flops(pruned), "params": count_params(pruned), "criterion": crit, "steps": trace.steps},
                "models",
                "pruned_metrics.json",
            )


def stage_quantize(cfg, ws: Workspace) -> None:
    tr, va = _data(ws)
    graph = io.load_graph(ws.need("models", "pruned.json"))
    folded = quantizer.fold_batchnorm(graph)
    calib = quantizer.calibrate(folded, tr[: cfg["data"]["n_calib"]])
    q16 = quantizer.assign(calib)
    targets = quantizer.QuantTargets(**cfg["quant"])
    try:
        result = quantizer.select_mixed_precision(folded, q16, calib, targets, _hw(cfg), "chained", _deploy(cfg, folded))
    except quantizer.TargetUnreachable as e:
        log.warning("%s; keeping the best-effort assignment", e)
        result = e.best
    io.save_graph(folded, ws.path("quant", "folded.json"))
    ws.write_json(calib.to_dict(), "quant", "calib.json")
    q16.save(ws.path("quant", "q16.json"))
    result.assignment.save(ws.path("quant", "mixed.json"))
    counts = {"detection": 0, "segmentation": 0, "soiling": 0, **class_counts(folded)}
    summary = {"float": evaluate(folded, va).as_dict(), "selection": result.summary()}
    for name, qa in (("q16", q16), ("mixed", result.assignment)):
        outs, sat = quantizer.quantized_predict(folded, qa, va)
        m = evaluate_outputs(outs, va, counts["detection"], counts["segmentation"], counts["soiling"])
        summary[name] = {"metrics": m.as_dict(), "sqnr_db": quantizer.graph_sqnr(folded, qa, va), "saturation": sat.to_dict()}
    ws.write_json(summary, "quant", "summary.json")


def _versions(cfg, ws: Workspace):
    """(name, graph, assignment, mode) for the four network versions of the deployment table."""
    q16 = quantizer.QAssignment.load(ws.need("quant", "q16.json"))
    mixed = quantizer.QAssignment.load(ws.need("quant", "mixed.json"))
    unpruned = quantizer.fold_batchnorm(io.load_graph(ws.need("models", "unpruned.json")))
    pruned = io.load_graph(ws.need("quant", "folded.json"))
    return [
        ("unpruned", unpruned, None, "naive"),
        ("pruned", pruned, q16, "naive"),
        ("chained", pruned, q16, "chained"),
        ("mixed", pruned, mixed, "chained"),
    ]


def stage_schedule(cfg, ws: Workspace) -> None:
    hw = _hw(cfg)
    for name, graph, qa, mode in _versions(cfg, ws):
        sched = socsim.build_schedule(graph, hw, qa, mode, _deploy(cfg, graph))
        ws.write_json(socsim.schedule_to_dict(sched), "schedules", f"{name}.json")


def stage_simulate(cfg, ws: Workspace) -> None:
    hw = _hw(cfg)
    for name, graph, qa, mode in _versions(cfg, ws):
        shapes = _deploy(cfg, graph)
        report = socsim.simulate(socsim.build_schedule(graph, hw, qa, mode, shapes), hw)
        doc = report.to_dict()
        doc["lower_bounds"] = socsim.lower_bounds(graph, hw, qa, shapes)
        doc["flops"] = count_flops(graph, shapes)
        doc["mode"] = mode
        ws.write_json(doc, "sim", f"{name}.json")
        report.per_layer_csv(ws.path("sim", f"{name}_layers.csv"))


def stage_report(cfg, ws: Workspace) -> dict:
    unpruned = ws.read_json("models", "unpruned_metrics.json")
    pruned = ws.read_json("models", "pruned_metrics.json")
    quant = ws.read_json("quant", "summary.json")
    table1 = [
        {"network": "unpruned", "flops": unpruned["flops"], "params": unpruned["params"], **unpruned["metrics"]},
        {"network": "pruned", "flops": pruned["flops"], "params": pruned["params"], **(pruned["metrics"] or {})},
    ]
    table2 = []
    for name in VERSIONS:
        sim = ws.read_json("sim", f"{name}.json")
        table2.append(
            {
                "network": name,
                "mode": sim["mode"],
                "fps": sim["fps"],
                "bandwidth_gbps": sim["bandwidth_gbps"],
                "footprint_mb": sim["footprint_mb"],
                "core_runs": sim["core_runs"],
                "utilization": sim["utilization"],
            }
        )
    table3 = [{"precision": "float", **quant["float"]}] + [
        {"precision": k, **quant[k]["metrics"], "sqnr_db": quant[k]["sqnr_db"], "saturated": quant[k]["saturation"]["total"]} for k in ("q16", "mixed")
    ]
    curves = sorted(p.name for p in (ws.root / "prune").glob("trace_*.csv"))
    report = {
        "config_hash": config_hash(cfg),
        "seed": cfg["seed"],
        "table1": table1,
        "table2": table2,
        "table3": table3,
        "mixed_selection": quant["selection"],
        "prune_curves": curves,
    }
    ws.write_json(report, "report.json")
    _write_csv(ws.path("table1.csv"), table1)
    _write_csv(ws.path("table2.csv"), table2)
    _write_csv(ws.path("table3.csv"), table3)
    return report


def _write_csv(path: Path, rows: list[dict]) -> None:
    keys: list[str] = []
    for r in rows:
        keys += [k for k in r if k not in keys]
    lines = [",".join(keys)]
    for r in rows:
        lines.append(",".join(_cell(r.get(k)) for k in keys))
    path.write_text("\n".join(lines) + "\n")


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


STAGE_FUNCS = {
    "gen-data": stage_gen_data,
    "train": stage_train,
    "prune": stage_prune,
    "quantize": stage_quantize,
    "schedule": stage_schedule,
    "simulate": stage_simulate,
    "report": stage_report,
}


def run_pipeline(cfg, ws: Workspace, start: str = "gen-data") -> None:
    for stage in STAGES[STAGES.index(start) :]:
        log.info("stage %s", stage)
        STAGE_FUNCS[stage](cfg, ws)


# --------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="embedcnn", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    for name in STAGES + ["pipeline"]:
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="JSON config path or bundled config name (e.g. 'demo')")
        p.add_argument("--out", default="runs/default", help="artifact directory")
        p.add_argument("--seed", type=int, default=None, help="overrides the config seed")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "pipeline":
            p.add_argument("--stage", choices=STAGES, default="gen-data", help="resume from this stage")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    ws = Workspace(args.out)
    stage = args.command if args.command != "pipeline" else args.stage
    try:
        cfg = load_config(args.config, args.seed)
        ws.root.mkdir(parents=True, exist_ok=True)
        ws.write_json(cfg, "config.json")
        if args.command == "pipeline":
            for s in STAGES[STAGES.index(args.stage) :]:
                stage = s
                log.info("stage %s", s)
                STAGE_FUNCS[s](cfg, ws)
        else:
            STAGE_FUNCS[args.command](cfg, ws)
    except Exception as exc:  # noqa: BLE001 - every failure becomes an error record
        code = exit_code_for(exc)
        record = {"stage": stage, "error": type(exc).__name__, "message": str(exc), "exit_code": code}
        try:
            ws.write_json(record, "errors", f"{stage}.json")
        except OSError:
            pass
        print(json.dumps(record), file=sys.stderr)
        return code
    return 0


if __name__ == "__main__":
    sys.exit(main())
