"""``modelab`` command line: every experiment as a reproducible batch command."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from ..data.corpora import DataConfigError, make_corpus, read_tokens, write_tokens
from ..data.vocab import decode
from ..model.config import ModeConfig, from_mapping, load_ini
from ..model.io import from_checkpoint, to_checkpoint
from ..model.mode import InputError, ModeModel
from ..shardsim import scenarios as sc
from ..shardsim.sim import (
    CalibrationError,
    CostModel,
    PlanError,
    ShardingPlan,
    simulate_step,
    spmd_plan,
)
from ..tensor import checkpoint as ck
from ..tensor.checkpoint import CheckpointError, params_hash
from ..tensor.nn import ConfigError
from ..training import experiments as ex
from ..training.train import (
    CompositionError,
    TrainingError,
    compose,
    evaluate,
    full_finetune,
    lora_finetune,
)
from .config import ResolvedConfig, documented_keys, resolve
from .runs import Run, completed_runs, csv_text, workdir_root

log = logging.getLogger("modelab")

EXIT_OK, EXIT_CONFIG, EXIT_ARTIFACT, EXIT_DIVERGED = 0, 2, 3, 4

TABLE1_LABELS = {
    "full-ft": "Full fine-tuning",
    "lora": "LoRA",
    "mode-1x-uninit": "MoDE 1x uninitialized expert",
    "mode-2x-uninit": "MoDE 2x uninitialized experts",
    "mode-2x-frozen": "MoDE 2x frozen experts",
    "mode-2x-experts": "MoDE 2x experts",
}

EPILOG = f"""\
config keys (INI sections; override with MODELAB_<SECTION>_<KEY> or --set section.key=value):
{documented_keys()}

report files (CSV with a header row, plus a JSON twin):
  report.csv     method, math, code, english, average, params_total, params_trainable, seed
  table1.csv     method, name, math, code, english, average, params_total, params_trainable, seeds
                 followed by one 'delta' row per comparison (arithmetic differences)
  sweep.csv      method, <domains>, average, params_total, params_trainable, seed, <sweep keys>
  simulate.csv   plan, meshes, expert_layers, merges, latency_s, compute_s, allreduce_s,
                 reshard_s, idle_s[, spmd_latency_s, speedup, point, idle_<mesh>_s]

exit codes: 0 ok, 2 config error, 3 artifact error, 4 training divergence
run directories: <workdir>/<command>/<UTC timestamp>-<seed>/ (workdir: --workdir or MODELAB_WORKDIR)
"""


class ArtifactError(RuntimeError):
    """A referenced run, checkpoint or report is missing or incompatible."""


# -- checkpoint helpers ---------------------------------------------------------------------------

def _load_backbone(path: str, cfg: ResolvedConfig) -> ModeModel:
    model = from_checkpoint(ck.load(path))
    if model.cfg.shape_hash() != cfg.model.shape_hash():
        raise ArtifactError(f"backbone {path} was built for a different model config")
    if model.cfg.n_experts or model.lora is not None:
        raise ArtifactError(f"{path} is not a bare backbone checkpoint")
    return model


def _backbone_hash(model: ModeModel) -> str:
    return params_hash({n: t.data for n, t in model.named("backbone").items()})


def _load_expert(path: str, backbone: ModeModel) -> ModeModel:
    c = ck.load(path)
    if c.meta.get("kind") != "expert":
        raise ArtifactError(f"{path} is not an expert checkpoint")
    if c.meta.get("backbone_hash") != _backbone_hash(backbone):
        raise ArtifactError(f"expert {path} was trained on a different backbone")
    cfg = ModeConfig(**c.config["model"])
    if cfg.shape_hash() != backbone.cfg.shape_hash():
        raise ArtifactError(f"expert {path} does not match the backbone's shape")
    params = {n: t.data for n, t in backbone.named("backbone").items()}
    params.update(c.params)
    return ModeModel(cfg, params)


def _save_model(run: Run, name: str, model: ModeModel, kind: str, names=None, **meta) -> None:
    meta = {"kind": kind, **meta}
    run.save_checkpoint(name, to_checkpoint(model, names=names, meta=meta))


def _report(run: Run, reports) -> list[dict]:
    rows = [r.row() for r in reports]
    run.write_report("report", rows)
    return rows


# -- commands ---------------------------------------------------------------------------------------

def cmd_pretrain_backbone(args, cfg: ResolvedConfig, run: Run) -> None:
    prof = cfg.profile()
    model = ex.build_backbone(prof)
    _save_model(run, "backbone.ckpt", model, "backbone", backbone_hash=_backbone_hash(model))
    data = ex.build_corpora(prof, cfg.seed)
    _report(run, [evaluate(model, data.test, "backbone", trainable=0, seed=cfg.seed)])


def cmd_train_expert(args, cfg: ResolvedConfig, run: Run) -> None:
    prof = cfg.profile()
    backbone = _load_backbone(args.backbone, cfg)
    data = ex.build_corpora(prof, cfg.seed)
    model = ex.train_domain_expert(prof, backbone, data, cfg.seed, args.domain)
    names = [n for n in model.params if n.startswith(("experts.", "gates."))]
    _save_model(run, "expert.ckpt", model, "expert", names=names, domain=args.domain,
                backbone_hash=_backbone_hash(backbone))
    _report(run, [evaluate(model, data.test, f"expert-{args.domain}", seed=cfg.seed)])


def _method_label(variant: str, n: int) -> str:
    if variant == "uninitialized":
        return f"mode-{n}x-uninit"
    return f"mode-{n}x-" + ("frozen" if variant == "frozen" else "experts")


def cmd_compose(args, cfg: ResolvedConfig, run: Run) -> None:
    prof = cfg.profile()
    backbone = _load_backbone(args.backbone, cfg)
    experts = [_load_expert(p, backbone) for p in args.expert or []]
    if args.variant == "uninitialized":
        n = args.n_uninitialized or len(experts)
        steps = prof.steps
    else:
        n = len(experts)
        steps = prof.stage2_steps
    if n < 1:
        raise ConfigError("compose needs at least one expert (--expert, or --n-uninitialized)")
    data = ex.build_corpora(prof, cfg.seed)
    res = compose(backbone, experts, data.mixture, prof.spec(steps, cfg.seed), args.variant,
                  n_uninitialized=n, gate_backbone_bias=prof.compose_gate_bias)
    label = _method_label(args.variant, n)
    _save_model(run, "model.ckpt", res.model, "composed", variant=args.variant, method=label)
    _report(run, [evaluate(res.model, data.test, label, seed=cfg.seed)])


def cmd_finetune(args, cfg: ResolvedConfig, run: Run) -> None:
    prof = cfg.profile()
    backbone = _load_backbone(args.backbone, cfg)
    data = ex.build_corpora(prof, cfg.seed)
    model = full_finetune(backbone, data.mixture, prof.spec(prof.steps, cfg.seed)).model
    _save_model(run, "model.ckpt", model, "finetuned", method="full-ft")
    _report(run, [evaluate(model, data.test, "full-ft", seed=cfg.seed)])


def cmd_lora(args, cfg: ResolvedConfig, run: Run) -> None:
    prof = cfg.profile()
    backbone = _load_backbone(args.backbone, cfg)
    data = ex.build_corpora(prof, cfg.seed)
    model = lora_finetune(backbone, data.mixture, cfg.lora, prof.spec(prof.steps, cfg.seed)).model
    names = [n for n in model.params if n.startswith("lora.")]
    _save_model(run, "adapters.ckpt", model, "lora", names=names, method="lora",
                backbone_hash=_backbone_hash(backbone))
    _report(run, [evaluate(model, data.test, "lora", seed=cfg.seed)])


def collect_table1(root: Path) -> list[dict]:
    """Average each method's report rows over the seeds found under ``root``."""
    found: dict[str, dict[int, dict]] = {}
    for command in ("finetune", "lora", "compose"):
        for d in completed_runs(root, command):
            rows = json.loads((d / "report.json").read_text())["rows"]
            for r in rows:
                if r["method"] in TABLE1_LABELS:
                    # later runs of the same method and seed replace earlier ones
                    found.setdefault(r["method"], {})[int(r["seed"])] = r
    missing = [m for m in TABLE1_LABELS if m not in found]
    if missing:
        raise ArtifactError(f"table1 is missing runs for: {', '.join(missing)}")
    out = []
    for m, name in TABLE1_LABELS.items():
        rows = [found[m][s] for s in sorted(found[m])]
        row = {"method": m, "name": name}
        for k in ("math", "code", "english", "average"):
            row[k] = float(np.mean([r[k] for r in rows]))
        row["params_total"] = rows[0]["params_total"]
        row["params_trainable"] = rows[0]["params_trainable"]
        row["seeds"] = " ".join(str(s) for s in sorted(found[m]))
        out.append(row)
    by = {r["method"]: r for r in out}
    for ref in ("full-ft", "lora"):
        a, b = by["mode-2x-experts"], by[ref]
        delta = {"method": "delta", "name": f"MoDE 2x experts vs {TABLE1_LABELS[ref]}"}
        for k in ("math", "code", "english", "average", "params_total", "params_trainable"):
            delta[k] = a[k] - b[k]
        delta["seeds"] = ""
        out.append(delta)
    return out


def cmd_table1(args, cfg: ResolvedConfig, run: Run) -> None:
    root = Path(args.source) if args.source else workdir_root(args.workdir)
    rows = collect_table1(root)
    run.write_report("table1", rows)
    print(csv_text(rows), end="")


def cmd_pipeline(args, cfg: ResolvedConfig, run: Run) -> None:
    """Backbone, both experts, every Table-1 method, then the consolidated table."""
    root = run.dir / "runs"
    base = dict(vars(args))

    def sub(command, fn, seed, **kw):
        a = argparse.Namespace(**{**base, **kw})
        c = resolve(args.config, list(args.set or []) + [f"run.seed={seed}"])
        r = Run(root, command, c.to_dict(), seed, _jsonable(a))
        fn(a, c, r)
        r.finish("ok", EXIT_OK)
        return r

    seeds = args.seeds or [cfg.seed]
    bb = sub("pretrain-backbone", cmd_pretrain_backbone, seeds[0])
    bpath = str(bb.dir / "backbone.ckpt")
    for s in seeds:
        exp = [sub("train-expert", cmd_train_expert, s, backbone=bpath, domain=d)
               for d in ex.ADAPT_DOMAINS]
        epaths = [str(r.dir / "expert.ckpt") for r in exp]
        for variant, n in (("standard", None), ("frozen", None), ("uninitialized", 1),
                           ("uninitialized", 2)):
            sub("compose", cmd_compose, s, backbone=bpath, variant=variant,
                expert=epaths if variant != "uninitialized" else [], n_uninitialized=n)
        sub("finetune", cmd_finetune, s, backbone=bpath)
        sub("lora", cmd_lora, s, backbone=bpath)
    rows = collect_table1(root)
    run.write_report("table1", rows)
    print(csv_text(rows), end="")


def cmd_sweep(args, cfg: ResolvedConfig, run: Run) -> None:
    prof = cfg.profile()
    backbone = _load_backbone(args.backbone, cfg) if args.backbone else ex.build_backbone(prof)
    s = cfg.seed
    if args.kind == "scaling":
        pts = [int(p) for p in args.points] if args.points else (
            [1, 2] if args.axis == "parameters" else [64, 256, 1024])
        reports = ex.sweep_scaling(prof, s, args.axis, pts, backbone=backbone)
    elif args.kind == "ablate":
        reports = ex.ablate_mode_configs(prof, s, tuple(args.blocks), tuple(args.layers), backbone)
    elif args.kind == "lora-ranks":
        reports = ex.lora_sweep(prof, s, tuple(args.ranks), ffn=tuple(args.ffn),
                                embeddings=tuple(args.embeddings), backbone=backbone,
                                allow_overcomplete=cfg.lora.allow_overcomplete)
    else:
        reports = ex.mixture_data_efficiency(prof, s, tuple(args.budgets), backbone=backbone)
    rows = [r.row() for r in reports]
    run.write_report("sweep", rows, {"kind": args.kind})
    print(csv_text(rows), end="")


def _load_cost(path: str | None) -> CostModel:
    if path is None:
        return sc.default_cost()
    if str(path).endswith(".json"):
        values = {k: str(v) for k, v in json.loads(Path(path).read_text()).items()}
    else:
        values = load_ini(path).get("cost", {})
    return from_mapping(CostModel, values)


def _load_plan(path: str) -> ShardingPlan:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"plan file not found: {p}")
    try:
        return ShardingPlan.from_dict(json.loads(p.read_text()))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"plan file {p} is not valid JSON: {exc}") from exc


def cmd_simulate(args, cfg: ResolvedConfig, run: Run) -> None:
    cost = _load_cost(args.cost_file)
    batch = args.batch
    files = {}
    sweeps = ["resharding", "expert-size", "merges"] if args.sweep == "all" else [args.sweep]
    if args.sweep is None:
        model = sc.reference_model() if args.model_file is None else from_mapping(
            ModeConfig, load_ini(args.model_file).get("model", {}))
        mpmd = _load_plan(args.plan_file) if args.plan_file else sc.three_mesh()
        kinds = args.plan or ["spmd", "mpmd"]
        rows = []
        for k in kinds:
            plan = spmd_plan(model, cost.n_devices) if k == "spmd" else mpmd
            rows.append(simulate_step(plan, model, cost, batch_size=batch).row())
        if "spmd" in kinds and "mpmd" in kinds:
            base = rows[kinds.index("spmd")]["latency_s"]
            for r in rows:
                r["speedup"] = base / r["latency_s"]
        files["simulate"] = rows
    for s in sweeps if args.sweep else []:
        if s == "resharding":
            files["sweep_resharding"] = sc.resharding_table(cost, batch)
        elif s == "expert-size":
            m = sc.reference_model(2, 2, 2)
            files["sweep_expert_size"] = [r.row() for r in sc.sweep_expert_size(
                sc.two_expert_plan(), m, args.sizes, cost, batch)]
        else:
            files["sweep_merges"] = [r.row() for r in sc.sweep_merges(
                sc.five_mesh(), sc.reference_model(), args.merges, cost, batch)]
    for stem, rows in files.items():
        run.write_report(stem, rows, {"cost_model": cost.to_dict(),
                                      "note": "latencies include forward and backward passes; "
                                              "merges move activations forward and gradients back"})
        print(f"# {stem}")
        print(csv_text(rows), end="")


def cmd_data(args, cfg: ResolvedConfig, run: Run) -> None:
    if args.inspect:
        c = read_tokens(args.inspect)
    else:
        c = make_corpus(args.domain, args.split, args.seed if args.seed is not None else cfg.seed,
                        args.n, args.T)
        name = f"{c.domain}-{c.split}.txt"
        write_tokens(c, run.dir / name)
        run.record(name)
    print(f"# domain={c.domain} split={c.split} seed={c.seed} n={c.n} T={c.seq_len}")
    for row in c.tokens[:args.show]:
        print(decode(row))


COMMANDS = {
    "pretrain-backbone": cmd_pretrain_backbone,
    "train-expert": cmd_train_expert,
    "compose": cmd_compose,
    "finetune": cmd_finetune,
    "lora": cmd_lora,
    "table1": cmd_table1,
    "pipeline": cmd_pipeline,
    "sweep": cmd_sweep,
    "simulate": cmd_simulate,
    "data": cmd_data,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI config file")
    common.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                        help="override one config value (repeatable)")
    common.add_argument("--seed", type=int, help="shorthand for --set run.seed=N")
    common.add_argument("--workdir", help="root of run directories (default $MODELAB_WORKDIR or ./runs)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="modelab", description=__doc__, epilog=EPILOG,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, help_):
        return sub.add_parser(name, parents=[common], help=help_, epilog=EPILOG,
                              formatter_class=argparse.RawDescriptionHelpFormatter)

    add("pretrain-backbone", "pre-train the backbone on all three domains")
    a = add("train-expert", "train one expert on a domain with the backbone frozen")
    a.add_argument("--backbone", required=True)
    a.add_argument("--domain", required=True, choices=ex.ADAPT_DOMAINS)
    a = add("compose", "combine experts with a fresh gate and tune on the math+code mixture")
    a.add_argument("--backbone", required=True)
    a.add_argument("--expert", action="append", help="expert checkpoint (repeatable)")
    a.add_argument("--variant", default="standard", choices=("standard", "frozen", "uninitialized"))
    a.add_argument("--n-uninitialized", type=int, help="number of new experts for the uninitialized variant")
    a = add("finetune", "full-parameter fine-tuning on the math+code mixture")
    a.add_argument("--backbone", required=True)
    a = add("lora", "LoRA fine-tuning on the math+code mixture")
    a.add_argument("--backbone", required=True)
    a = add("table1", "consolidate finetune/lora/compose runs into the comparison table")
    a.add_argument("source", nargs="?", help="workdir holding the runs (default: --workdir)")
    a = add("pipeline", "run every step of the comparison table and consolidate it")
    a.add_argument("--seeds", type=int, nargs="+")
    a = add("sweep", "scaling sweeps and ablations")
    a.add_argument("kind", choices=("scaling", "ablate", "lora-ranks", "mixture"))
    a.add_argument("--backbone")
    a.add_argument("--axis", default="parameters", choices=("parameters", "examples"))
    a.add_argument("--points", nargs="+")
    a.add_argument("--blocks", type=int, nargs="+", default=[2, 3])
    a.add_argument("--layers", type=int, nargs="+", default=[1, 2])
    a.add_argument("--ranks", type=int, nargs="+", default=[8, 16, 32])
    a.add_argument("--ffn", type=_bool, nargs="+", default=[False])
    a.add_argument("--embeddings", type=_bool, nargs="+", default=[False])
    a.add_argument("--budgets", type=int, nargs="+", default=[0, 64, 256, 1024])
    a = add("simulate", "SPMD/MPMD step-latency simulation")
    a.add_argument("--plan", action="append", choices=("spmd", "mpmd"))
    a.add_argument("--plan-file", help="JSON MPMD plan (default: the 3-mesh placement)")
    a.add_argument("--model-file", help="INI file with a [model] section (default: reference model)")
    a.add_argument("--cost-file", help="INI [cost] section or JSON cost model (default: calibrated)")
    a.add_argument("--sweep", choices=("resharding", "expert-size", "merges", "all"),
                   help="write per-sweep data files instead of a single comparison")
    a.add_argument("--sizes", type=int, nargs="+", default=[1, 2, 3, 4, 5, 6])
    a.add_argument("--merges", type=int, nargs="+", default=[1, 2, 3, 6])
    a.add_argument("--batch", type=int, default=sc.REFERENCE_BATCH)
    a = add("data", "dump or inspect a synthetic corpus")
    a.add_argument("--domain", default="math", choices=("math", "code", "english"))
    a.add_argument("--split", default="train", choices=("train", "test"))
    a.add_argument("--n", type=int, default=8)
    a.add_argument("--T", type=int, default=33)
    a.add_argument("--show", type=int, default=3, help="print this many decoded rows")
    a.add_argument("--inspect", help="read a dumped token file instead of generating")
    return p


def _bool(s: str) -> bool:
    low = s.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {s!r}")


def _jsonable(ns: argparse.Namespace) -> dict:
    return {k: v for k, v in vars(ns).items() if k not in ("verbose",)}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    sets = list(args.set or [])
    if args.seed is not None:
        sets.append(f"run.seed={args.seed}")
        args.set = sets
    run = None
    try:
        cfg = resolve(args.config, sets)
        run = Run(workdir_root(args.workdir), args.command, cfg.to_dict(), cfg.seed, _jsonable(args))
        COMMANDS[args.command](args, cfg, run)
        code, status, err = EXIT_OK, "ok", None
    except (ConfigError, DataConfigError, PlanError, CalibrationError, InputError) as exc:
        code, status, err = EXIT_CONFIG, "config-error", str(exc)
    except (ArtifactError, CheckpointError, CompositionError, FileNotFoundError) as exc:
        code, status, err = EXIT_ARTIFACT, "artifact-error", str(exc)
    except TrainingError as exc:
        code, status, err = EXIT_DIVERGED, "diverged", str(exc)
    if err:
        print(f"modelab: error: {err}", file=sys.stderr)
    if run is not None:
        run.finish(status, code, err)
        print(f"run directory: {run.dir}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
