"""Command line front end.

Usage: ``deltadapter <command> [--config FILE] [--set section.key=value ...]``.

The config file is INI (``configparser``) with sections ``data``, ``model``,
``pretrain``, ``train``, ``eval``, ``tta`` and ``ablate``; keys mirror the
dataclass fields (model keys are dotted, e.g. ``backbone.width``). Any key
can be overridden with ``--set``. Each command writes the fully resolved
config next to its main output as ``<output>.resolved.ini``.

Exit codes: 0 ok, 1 usage, 2 config, 3 data/checkpoint incompatibility,
4 numeric failure. Errors print one line ``error[<tag>]: <message>``.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import io
import os
import sys
from pathlib import Path

ENV_CONFIG = "DELTADAPTER_CONFIG"
_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


class UsageError(Exception):
    exit_code = 1
    tag = "usage"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# -- config ---------------------------------------------------------------
def _fields(obj, prefix: str = "") -> dict[str, object]:
    import dataclasses
    out = {}
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        if dataclasses.is_dataclass(v):
            out.update(_fields(v, f"{f.name}."))
        else:
            out[prefix + f.name] = v
    return out


def default_config() -> dict[str, dict[str, object]]:
    from .model import ModelConfig
    from .synth import DataConfig
    from .trainer import TrainConfig

    model = _fields(ModelConfig())
    model.pop("variant")
    pre = _fields(TrainConfig(stage="pretrain", steps=2000))
    train = _fields(TrainConfig())
    for d in (pre, train):
        d.pop("dataset")
        d.pop("checkpoint")
    return {
        "data": _fields(DataConfig()),
        "model": model,
        "pretrain": pre,
        "train": train,
        "eval": {"seed": 0, "steps": 4, "splits": ("seen", "unseen"), "lambda_grid": "", "limit": ""},
        "tta": {"steps": 20, "lr": 5e-4, "seed": 0, "noise_draws": 16, "scope": "all"},
        "ablate": {"seeds": (0,), "variants": ""},
    }


def _coerce(raw: str, like):
    raw = raw.strip()
    try:
        if isinstance(like, bool):
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(like, int):
            return int(raw)
        if isinstance(like, float):
            return float(raw)
        if isinstance(like, tuple):
            items = [x.strip() for x in raw.split(",") if x.strip()]
            if like and isinstance(like[0], int):
                return tuple(int(x) for x in items)
            return tuple(items)
        if like is None:
            return None if raw in ("", "none", "None") else tuple(int(x) for x in raw.split(","))
        return raw
    except ValueError as exc:
        from .errors import ConfigError
        raise ConfigError(f"cannot parse {raw!r} as {type(like).__name__}") from exc


def _fmt(v) -> str:
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    return "" if v is None else str(v)


def load_config(path: str | None, overrides: list[str]) -> dict[str, dict[str, object]]:
    from .errors import ConfigError

    cfg = default_config()
    path = path or os.environ.get(ENV_CONFIG)
    entries: list[tuple[str, str, str]] = []
    if path:
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        try:
            with open(path, encoding="utf-8") as fh:
                cp.read_file(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except configparser.Error as exc:
            raise ConfigError(f"malformed config {path}: {exc}") from exc
        for section in cp.sections():
            if section == "run":
                continue
            for key, val in cp.items(section):
                entries.append((section, key, val))
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        lhs, val = item.split("=", 1)
        section, key = lhs.split(".", 1)
        entries.append((section, key, val))
    for section, key, val in entries:
        if section not in cfg:
            raise ConfigError(f"unknown config section [{section}]")
        if key not in cfg[section]:
            raise ConfigError(f"unknown key {key!r} in [{section}]")
        cfg[section][key] = _coerce(val, cfg[section][key])
    return cfg


def render_config(cfg: dict, run: dict[str, object] | None = None) -> str:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    for section, values in cfg.items():
        cp[section] = {k: _fmt(v) for k, v in values.items()}
    buf = io.StringIO()
    cp.write(buf)
    body = buf.getvalue()
    digest = hashlib.sha256(body.encode()).hexdigest()[:16]
    head = f"# resolved config, hash {digest}\n"
    if run:
        tail = "[run]\n" + "".join(f"{k} = {_fmt(v)}\n" for k, v in run.items()) + "\n"
        return head + body + tail
    return head + body


def config_digest(cfg: dict) -> str:
    return render_config(cfg).split("hash ", 1)[1].split("\n", 1)[0]


def write_snapshot(out: Path, cfg: dict, args: argparse.Namespace) -> Path:
    run = {k: v for k, v in vars(args).items() if k not in ("func", "set", "config") and v is not None}
    path = out.with_name(out.name + ".resolved.ini")
    path.write_text(render_config(cfg, run), encoding="utf-8")
    return path


def data_config(cfg):
    from .synth import DataConfig
    return DataConfig(**cfg["data"])


def model_config(cfg):
    from .adapter import AdapterConfig
    from .flownet import BackboneConfig
    from .model import ModelConfig
    from .toyvision import EncoderConfig
    parts = {"encoder": {}, "backbone": {}, "adapter": {}}
    for k, v in cfg["model"].items():
        head, name = k.split(".", 1)
        parts[head][name] = v
    return ModelConfig(EncoderConfig(**parts["encoder"]), BackboneConfig(**parts["backbone"]),
                       AdapterConfig(**parts["adapter"]))


def train_config(cfg, section: str, **extra):
    from .trainer import TrainConfig
    return TrainConfig(**{**cfg[section], **extra})


# -- helpers ----------------------------------------------------------------
def _write_losses(path: Path, history: list[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "flow", "sdc", "total", "grad_norm"])
        for r in history:
            w.writerow([r["step"], repr(r["flow"]), repr(r["sdc"]), repr(r["total"]), repr(r["grad_norm"])])


def _verify_ckpt(ckpt, expect: str | None = None):
    from .errors import IncompatibleError
    stored = ckpt.config_hash
    actual = ckpt.model_config.config_hash()
    if stored != actual:
        raise IncompatibleError(f"checkpoint hash {stored} does not match its own config ({actual})")
    if expect and expect != stored:
        raise IncompatibleError(f"checkpoint config hash {stored} != expected {expect}")
    return ckpt


def _episode(path: str, index: int):
    from .errors import ContractError
    from .synth import load_dataset
    ds = load_dataset(path)
    if not 0 <= index < len(ds.episodes):
        raise ContractError(f"{path}: episode index {index} out of range (0..{len(ds.episodes) - 1})")
    return ds, ds.episodes[index]


def _progress(quiet: bool, every: int = 250):
    def cb(rec):
        if not quiet and rec["step"] % every == 0:
            print(f"step {rec['step']} flow {rec['flow']:.5f} total {rec['total']:.5f}", file=sys.stderr)
    return cb


# -- commands -------------------------------------------------------------
def cmd_gen_data(args, cfg) -> int:
    from .synth import gen_dataset, save_dataset
    out = Path(args.out)
    save_dataset(gen_dataset(data_config(cfg)), out)
    write_snapshot(out, cfg, args)
    print(out)
    return 0


def cmd_pretrain(args, cfg) -> int:
    from .synth import load_dataset
    from .trainer import pretrain_trainer

    ds = load_dataset(args.data)
    tc = train_config(cfg, "pretrain", stage="pretrain", dataset=str(args.data), checkpoint=str(args.out))
    tr = pretrain_trainer(tc, ds, model_config(cfg))
    tr.run(callback=_progress(args.quiet))
    return _save_run(args, cfg, tr)


def cmd_train(args, cfg) -> int:
    from .synth import load_dataset
    from .trainer import Checkpoint, adapter_trainer, make_variant

    ds = load_dataset(args.data)
    base = Checkpoint.load(args.base)
    extra = {"variant": args.variant} if args.variant else {}
    tc = train_config(cfg, "train", dataset=str(args.data), checkpoint=str(args.out), **extra)
    mc, tc = make_variant(tc.variant, model_config(cfg), tc)
    tr = adapter_trainer(tc, base, ds, mc)
    tr.run(callback=_progress(args.quiet))
    return _save_run(args, cfg, tr)


def _save_run(args, cfg, tr) -> int:
    out = Path(args.out)
    tr.checkpoint().save(out)
    _write_losses(out.with_name(out.name + ".loss.csv"), tr.history)
    write_snapshot(out, cfg, args)
    print(out)
    return 0


def cmd_edit(args, cfg) -> int:
    import numpy as np
    from .synth import Dataset, Episode, edit_mask, save_dataset
    from .toyvision import to_ppm
    from .trainer import Checkpoint

    ckpt = _verify_ckpt(Checkpoint.load(args.ckpt), args.expect_hash)
    model = ckpt.build_model()
    _, pair = _episode(args.pair, args.pair_index)
    qds, qep = _episode(args.query, args.query_index)
    b = qep.query if args.query_field == "query" else qep.source
    shape = (model.config.backbone.tokens, model.config.backbone.latent_dim)
    z1 = np.random.default_rng(args.seed).standard_normal(shape)
    out_img = model.edit(pair.source, pair.target, b, z1=z1, steps=args.steps, lam=args.lam)
    out_img = out_img.astype(np.float32)
    ep = Episode(pair.source, pair.target, b.astype(np.float32), out_img, pair.mask_source,
                 edit_mask(b, out_img), pair.spec, pair.split, pair.seed)
    out = Path(args.out)
    save_dataset(Dataset(qds.height, qds.width, qds.channels, qds.patch, [ep]), out)
    stem = out.with_suffix("")
    for name, img in (("a", pair.source), ("a2", pair.target), ("b", b), ("out", out_img)):
        Path(f"{stem}.{name}.ppm").write_bytes(to_ppm(img))
    write_snapshot(out, cfg, args)
    print(out)
    return 0


def cmd_tta(args, cfg) -> int:
    from .trainer import Checkpoint, tta

    ckpt = _verify_ckpt(Checkpoint.load(args.ckpt), args.expect_hash)
    _, pair = _episode(args.pair, args.pair_index)
    t = cfg["tta"]
    adapted = tta(ckpt, (pair.source, pair.target), steps=t["steps"], lr=t["lr"], seed=t["seed"],
                  scope=t["scope"], noise_draws=t["noise_draws"])
    out = Path(args.out)
    adapted.save(out)
    write_snapshot(out, cfg, args)
    print(out)
    return 0


def _grid(text: str):
    from .errors import ConfigError
    if not text:
        return None
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad lambda grid {text!r}") from exc


def cmd_eval(args, cfg) -> int:
    from .evaluation import eval_run
    from .synth import load_dataset
    from .trainer import Checkpoint

    ckpt = _verify_ckpt(Checkpoint.load(args.ckpt), args.expect_hash)
    ds = load_dataset(args.data)
    e = cfg["eval"]
    grid = _grid(args.lambda_grid if args.lambda_grid is not None else e["lambda_grid"])
    limit = int(e["limit"]) if str(e["limit"]).strip() else None
    report = eval_run(ckpt, ds, lambda_grid=grid, splits=e["splits"], seed=e["seed"], steps=e["steps"],
                      limit=limit)
    report.meta["run_config_hash"] = config_digest(cfg)
    out = Path(args.out)
    out.write_text(report.to_json(), encoding="utf-8")
    out.with_suffix(".csv").write_text(report.to_csv(), encoding="utf-8")
    write_snapshot(out, cfg, args)
    for lam, groups in report.aggregates().items():
        for split in ("seen", "unseen"):
            if split in groups:
                g = groups[split]
                print(f"lambda={lam} {split}: accuracy={g['accuracy']:.3f} "
                      f"consistency_mse={g['consistency_mse']:.5f} target_mse={g['target_mse']:.5f} "
                      f"delta_alignment={g['delta_alignment']:.3f}")
    return 0


def cmd_ablate(args, cfg) -> int:
    from .ablation import run_ablation
    from .model import VARIANTS, canonical_variant
    from .synth import load_dataset
    from .trainer import Checkpoint

    ds = load_dataset(args.data)
    base = Checkpoint.load(args.base)
    tags = args.variant or [v for v in cfg["ablate"]["variants"].split(";") if v.strip()] or list(VARIANTS)
    tags = [canonical_variant(t) for t in tags]
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    def keep(tag, seed, ckpt):
        if args.keep_checkpoints:
            ckpt.save(out_dir / f"{tag.replace('/', '').replace(' ', '_')}.seed{seed}.dfc1")

    table = run_ablation(base, ds, tags, cfg["ablate"]["seeds"], train_config(cfg, "train"),
                         splits=cfg["eval"]["splits"], eval_seed=cfg["eval"]["seed"], on_trained=keep)
    (out_dir / "ablation.json").write_text(table.to_json(), encoding="utf-8")
    (out_dir / "ablation.csv").write_text(table.to_csv(), encoding="utf-8")
    write_snapshot(out_dir / "ablation.json", cfg, args)
    sys.stdout.write(table.to_csv())
    return 0


def cmd_gradcheck(args, cfg) -> int:
    from .gradcheck import CASES, run_case
    names = args.op or list(CASES)
    failed = 0
    for n in names:
        if n not in CASES:
            raise UsageError(f"unknown op {n!r}")
        r = run_case(n, args.cases, args.seed)
        failed += not r.passed
        print(f"{'PASS' if r.passed else 'FAIL'} {n} worst_rel_err={r.worst:.3e} cases={r.cases}")
    if failed:
        from .errors import NumericError
        raise NumericError(f"{failed} gradient check(s) failed")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="deltadapter", description="Exemplar-pair editing with a delta adapter (toy scale).")
    sub = p.add_subparsers(dest="command", metavar="command", parser_class=_Parser)

    def command(name, func, help_text):
        sp = sub.add_parser(name, help=help_text, description=help_text)
        sp.add_argument("--config", help=f"INI config file (default: ${ENV_CONFIG} if set, else built-in defaults)")
        sp.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config key; repeatable")
        sp.add_argument("--threads", type=int, default=1,
                        help="BLAS threads; 1 (default) is the bitwise-deterministic mode")
        sp.add_argument("--quiet", action="store_true", help="suppress progress lines on stderr")
        sp.set_defaults(func=func)
        return sp

    sp = command("gen-data", cmd_gen_data, "generate a DFD1 episode dataset")
    sp.add_argument("--out", required=True, help="output .dfd1 path")

    sp = command("pretrain", cmd_pretrain, "stage 1: train the backbone as a conditional identity generator")
    sp.add_argument("--data", required=True, help="DFD1 dataset")
    sp.add_argument("--out", required=True, help="output DFC1 checkpoint; a .loss.csv is written alongside")

    sp = command("train", cmd_train, "stage 2: train the adapter on a frozen stage-1 backbone")
    sp.add_argument("--data", required=True, help="DFD1 dataset")
    sp.add_argument("--base", required=True, help="stage-1 DFC1 checkpoint")
    sp.add_argument("--out", required=True, help="output DFC1 checkpoint; a .loss.csv is written alongside")
    sp.add_argument("--variant", help="ablation variant tag (default: [train] variant)")

    sp = command("edit", cmd_edit, "apply the edit of an exemplar pair to a query image")
    sp.add_argument("--ckpt", required=True, help="adapter DFC1 checkpoint")
    sp.add_argument("--pair", required=True, help="DFD1 file whose episode supplies (a, a')")
    sp.add_argument("--pair-index", type=int, default=0, help="episode index inside --pair")
    sp.add_argument("--query", required=True, help="DFD1 file whose episode supplies the query b")
    sp.add_argument("--query-index", type=int, default=0, help="episode index inside --query")
    sp.add_argument("--query-field", choices=("query", "source"), default="query",
                    help="which image of the query episode to edit")
    sp.add_argument("--lambda", dest="lam", type=float, help="injection strength (default: learned value)")
    sp.add_argument("--steps", type=int, default=4, help="Euler sampling steps")
    sp.add_argument("--seed", type=int, default=0, help="noise seed")
    sp.add_argument("--expect-hash", help="refuse checkpoints with a different config hash")
    sp.add_argument("--out", required=True,
                    help="output single-episode DFD1; PPM previews <out>.{a,a2,b,out}.ppm are written alongside")

    sp = command("tta", cmd_tta, "test-time adaptation on one exemplar pair")
    sp.add_argument("--ckpt", required=True, help="adapter DFC1 checkpoint (left untouched)")
    sp.add_argument("--pair", required=True, help="DFD1 file whose episode supplies (a, a')")
    sp.add_argument("--pair-index", type=int, default=0, help="episode index inside --pair")
    sp.add_argument("--expect-hash", help="refuse checkpoints with a different config hash")
    sp.add_argument("--out", required=True, help="adapted DFC1 checkpoint")

    sp = command("eval", cmd_eval, "evaluate a checkpoint on held-out episodes")
    sp.add_argument("--ckpt", required=True, help="adapter DFC1 checkpoint")
    sp.add_argument("--data", required=True, help="DFD1 dataset")
    sp.add_argument("--lambda-grid", help="comma-separated injection strengths, e.g. 0,0.25,0.5")
    sp.add_argument("--expect-hash", help="refuse checkpoints with a different config hash")
    sp.add_argument("--out", required=True, help="report JSON; a CSV with the same stem is written alongside")

    sp = command("ablate", cmd_ablate, "train and evaluate all ablation variants from one stage-1 checkpoint")
    sp.add_argument("--data", required=True, help="DFD1 dataset")
    sp.add_argument("--base", required=True, help="shared stage-1 DFC1 checkpoint")
    sp.add_argument("--variant", action="append", help="restrict to this variant; repeatable")
    sp.add_argument("--keep-checkpoints", action="store_true", help="save each variant's checkpoint")
    sp.add_argument("--out-dir", required=True, help="directory for ablation.json / ablation.csv")

    sp = command("gradcheck", cmd_gradcheck, "run the finite-difference gradient suite")
    sp.add_argument("--cases", type=int, default=20, help="seeded cases per operation")
    sp.add_argument("--seed", type=int, default=0, help="suite seed")
    sp.add_argument("--op", action="append", help="restrict to this operation; repeatable")
    return p


def _set_threads(argv: list[str]) -> None:
    n = None
    for i, a in enumerate(argv):
        if a == "--threads" and i + 1 < len(argv):
            n = argv[i + 1]
        elif a.startswith("--threads="):
            n = a.split("=", 1)[1]
    if n is not None and n.isdigit() and "numpy" not in sys.modules:
        for var in _THREAD_VARS:
            os.environ[var] = n


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    _set_threads(argv)
    try:
        args = build_parser().parse_args(argv)
        if not getattr(args, "func", None):
            raise UsageError("missing command; see --help")
        if args.threads < 1:
            raise UsageError("--threads must be >= 1")
        cfg = load_config(args.config, args.set)
        return args.func(args, cfg)
    except UsageError as exc:
        print(f"error[usage]: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # map library errors onto exit codes
        from .errors import DeltaAdapterError
        if isinstance(exc, DeltaAdapterError):
            print(f"error[{exc.tag}]: {exc}", file=sys.stderr)
            return exc.exit_code
        if isinstance(exc, (FileNotFoundError, IsADirectoryError, PermissionError)):
            print(f"error[io]: {exc}", file=sys.stderr)
            return 3
        if isinstance(exc, FloatingPointError):
            print(f"error[numeric]: {exc}", file=sys.stderr)
            return 4
        raise


if __name__ == "__main__":
    sys.exit(main())
