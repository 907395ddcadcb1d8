"""``lookwhere`` command line: train-teacher, pretrain, finetune, eval, selectmap.

Heavy imports happen inside :func:`main` after ``LOOKWHERE_THREADS`` has been
copied into the BLAS thread variables, so numpy starts with the right pool size.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS")


class CliError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(message)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", type=Path, help="key=value config file with [section] headers")
    common.add_argument("--seed", type=int, help="run seed (overrides run.seed)")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config value; repeatable")
    common.add_argument("--out", type=Path, help="output file")
    common.add_argument("--k", type=str, help="number of selected patches")

    p = _Parser(prog="lookwhere", description="Selector-extractor ViT with what-where distillation.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("train-teacher", parents=[common], help="train the tiny full-resolution teacher")
    sp = sub.add_parser("pretrain", parents=[common], help="what-where distillation from a teacher checkpoint")
    sp.add_argument("--teacher", type=Path, required=True)
    sp.add_argument("--report-dir", type=Path, help="also write loss history and a loss-curve figure here")
    sp = sub.add_parser("finetune", parents=[common], help="train extractor + linear head, selector frozen")
    sp.add_argument("--model", type=Path, required=True)
    sp = sub.add_parser("eval", parents=[common], help="print the CSV metric report")
    sp.add_argument("--model", type=Path, required=True)
    sp.add_argument("--report-dir", type=Path, help="write metrics.csv, metrics.txt and figures here")
    sp = sub.add_parser("selectmap", parents=[common], help="export a selector heatmap and top-k coordinates")
    sp.add_argument("--model", type=Path, required=True)
    sp.add_argument("--image", type=Path, required=True, help=".npy or raw little-endian float32 image")
    sp.add_argument("--teacher", type=Path, help="add the teacher map to the figure")
    sp.add_argument("--report-dir", type=Path, help="write a map figure here")
    sp.add_argument("--upscale", type=int, default=8)
    return p


def _threads() -> None:
    n = os.environ.get("LOOKWHERE_THREADS", "1")
    if not n.isdigit() or int(n) < 1:
        raise CliError(f"LOOKWHERE_THREADS must be a positive integer, got {n!r}")
    for var in THREAD_VARS:
        os.environ[var] = n


def _load_config(args):
    from .config import RunConfig

    overrides = list(args.overrides)
    if args.k is not None:
        key = {"finetune": "train.finetune_k", "eval": "eval.k"}.get(args.command)
        if key is not None:
            overrides.append(f"{key}={args.k}")
        elif args.command != "selectmap":
            raise CliError(f"--k has no meaning for {args.command}")
    cfg = RunConfig.load(args.config, overrides, args.seed)
    for line in cfg.resolved():
        print(f"config {line}", file=sys.stderr)
    return cfg


def _require_out(args) -> Path:
    if args.out is None:
        raise CliError(f"{args.command} needs --out")
    parent = args.out.resolve().parent
    if not parent.is_dir() or not os.access(parent, os.W_OK):
        raise CliError(f"output directory {parent} is not writable")
    return args.out


def _read(path: Path, what: str):
    from .data import load_checkpoint

    if not path.is_file():
        raise CliError(f"{what} checkpoint {path} does not exist")
    return load_checkpoint(path)


def _check_arch(cfg, ckpt_cfg, sections=("model", "selector")) -> None:
    """The checkpoint fixes the architecture; refuse a config that disagrees."""
    for section in sections:
        for key, value in ckpt_cfg.values[section].items():
            if cfg.get(section, key) != value:
                raise CliError(f"checkpoint has {section}.{key}={value} but the config says {cfg.get(section, key)}")
    if cfg.get("data", "image_side") != ckpt_cfg.get("data", "image_side"):
        raise CliError("checkpoint image side differs from data.image_side")


def cmd_train_teacher(args) -> None:
    from . import pipeline
    from .data import save_checkpoint

    cfg = _load_config(args)
    out = _require_out(args)
    params, head, acc = pipeline.stage_teacher(cfg, log=sys.stderr)
    save_checkpoint(out, pipeline.teacher_checkpoint(cfg, params, head, acc))
    print(f"train_accuracy={acc:.4f}")


def cmd_pretrain(args) -> None:
    from . import pipeline
    from .config import RunConfig
    from .data import save_checkpoint

    cfg = _load_config(args)
    out = _require_out(args)
    ckpt = _read(args.teacher, "teacher")
    _check_arch(cfg, RunConfig.from_dict(ckpt.config["run"]), ("model",))
    teacher_params, _ = pipeline.load_teacher(ckpt)
    res = pipeline.stage_pretrain(cfg, teacher_params, log=sys.stderr)
    history = [{k: float(v) if k != "epoch" else int(v) for k, v in h.items()} for h in res.history]
    for h in history:
        print(f"epoch {h['epoch']} total {h['total']:.6f} cls {h['cls']:.6f} pat {h['pat']:.6f} map {h['map']:.6f}")
    print(f"map_kl_init={res.kl_before:.6f} map_kl_final={res.kl_after:.6f}")
    save_checkpoint(out, pipeline.model_checkpoint(cfg, res.model, "pretrained", history=history))
    if args.report_dir is not None:
        from .evaluate import to_csv
        from .plots import loss_curves

        args.report_dir.mkdir(parents=True, exist_ok=True)
        (args.report_dir / "pretrain_history.csv").write_text(to_csv(history), encoding="utf-8")
        loss_curves(history, args.report_dir / "pretrain_losses.png")


def cmd_finetune(args) -> None:
    from . import pipeline
    from .data import save_checkpoint

    cfg = _load_config(args)
    out = _require_out(args)
    ckpt_cfg, model, _ = pipeline.load_model(_read(args.model, "model"))
    _check_arch(cfg, ckpt_cfg)
    head = pipeline.stage_finetune(cfg, model, log=sys.stderr)
    save_checkpoint(out, pipeline.model_checkpoint(cfg, model, "finetuned", head=head))
    print(f"wrote {out}")


def cmd_eval(args) -> None:
    from . import pipeline
    from .evaluate import to_csv, to_table

    cfg = _load_config(args)
    ckpt_cfg, model, head = pipeline.load_model(_read(args.model, "model"))
    _check_arch(cfg, ckpt_cfg)
    if head is not None:
        cfg.set("train", "finetune_head", ckpt_cfg.get("train", "finetune_head"))
    rows = pipeline.evaluate_model(cfg, model, head)
    text = to_csv(rows)
    sys.stdout.write(text)
    if args.out is not None:
        _require_out(args).write_text(text, encoding="utf-8")
    if args.report_dir is not None:
        d = args.report_dir
        d.mkdir(parents=True, exist_ok=True)
        (d / "metrics.csv").write_text(text, encoding="utf-8")
        (d / "metrics.txt").write_text(to_table(rows) + "\n", encoding="utf-8")
        if cfg.bool("eval", "figures"):
            from .plots import accuracy_vs_k, flops_vs_k, map_panel

            metric = "accuracy" if head is not None else "knn_accuracy"
            accuracy_vs_k(rows, d / "accuracy_vs_k.png", metric)
            flops_vs_k(rows, d / "flops_vs_k.png")
            _, test = pipeline.datasets(cfg)
            k = cfg.eval_ks()[0]
            from .selector import top_k_select

            smap = pipeline.selector_map(test.images[0], model)
            map_panel(test.images[0], {"selector": smap}, d / "selector_map.png", top_k_select(smap, k))


def cmd_selectmap(args) -> None:
    from . import pipeline
    from .data import read_image_tensor, write_heatmap_pgm
    from .selector import top_k_select

    cfg = _load_config(args)
    out = _require_out(args)
    ckpt_cfg, model, _ = pipeline.load_model(_read(args.model, "model"))
    vc = ckpt_cfg.vit_config()
    image = read_image_tensor(args.image, vc.image_size, vc.image_channels)
    smap = pipeline.selector_map(image, model)
    n = smap.shape[0]
    k = n * n if args.k is None else _parse_k(args.k, n * n)
    write_heatmap_pgm(smap, out, upscale=max(1, args.upscale))
    idx = top_k_select(smap, k)
    lines = ["row,col,score"] + [f"{i // n},{i % n},{smap[i // n, i % n]:.6g}" for i in idx]
    coords = out.with_suffix(".topk.txt")
    coords.write_text("\n".join(lines) + "\n", encoding="utf-8")
    print("\n".join(lines))
    if args.report_dir is not None:
        from .plots import map_panel

        maps = {"selector": smap}
        if args.teacher is not None:
            from .train import Teacher

            teacher_params, _ = pipeline.load_teacher(_read(args.teacher, "teacher"))
            pc = cfg.pretrain_config()
            maps["teacher"] = Teacher(teacher_params, pc.aggregation).targets(image[None]).attention_map[0]
        args.report_dir.mkdir(parents=True, exist_ok=True)
        map_panel(image, maps, args.report_dir / "selectmap.png", idx)


def _parse_k(text: str, n: int) -> int:
    try:
        k = int(text)
    except ValueError:
        raise CliError(f"--k must be an integer, got {text!r}") from None
    if not 1 <= k <= n:
        raise CliError(f"--k must lie in [1, {n}]")
    return k


COMMANDS = {"train-teacher": cmd_train_teacher, "pretrain": cmd_pretrain, "finetune": cmd_finetune,
            "eval": cmd_eval, "selectmap": cmd_selectmap}


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        _threads()
        COMMANDS[args.command](args)
    except SystemExit as e:  # --help
        return int(e.code or 0)
    except KeyboardInterrupt:
        print("lookwhere: interrupted", file=sys.stderr)
        return 130
    except Exception as e:  # noqa: BLE001 - every failure becomes one diagnostic line
        msg = " ".join(str(e).split()) or type(e).__name__
        print(f"lookwhere: error: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
