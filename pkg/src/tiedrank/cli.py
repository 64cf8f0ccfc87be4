"""Command-line surface: synth | train | eval | gradcheck | ablate.

Every command resolves its flags into a manifest that is written before any
computation, so `tiedrank --from-manifest <path>` reproduces the run.

Exit codes: 0 ok, 2 usage, 3 numeric fault, 4 artifact mismatch,
5 gradcheck failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from . import __version__
from . import autodiff as ad
from .data import generate_synthetic, load_dataset, split_by_audio, write_dataset
from .errors import (
    CheckpointError,
    ConfigError,
    ContractError,
    DatasetError,
    NumericFault,
    ShapeError,
)
from .evaluate import evaluate
from .losses import LossConfig
from .model import PRESETS, PRESET_ALIASES, ModelConfig, load_checkpoint, preset_config, save_checkpoint
from .train import (
    TrainConfig,
    ablation_csv,
    ablation_grid,
    ablation_table,
    train,
    write_history_csv,
)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERIC = 3
EXIT_ARTIFACT = 4
EXIT_GRADCHECK = 5

_AXIS_FLAGS = {
    "contrastive": "use_contrastive",
    "trainable-embeddings": "trainable_embeddings",
    "tied-kind": "tied_kind",
    "tied": "tied",
}


def _fail(message: str) -> None:
    print(f"error: {message}", file=sys.stderr)


def _write_manifest(out_dir: Path, command: str, cfg: dict) -> None:
    manifest = {
        "tool": "tiedrank",
        "version": __version__,
        "command": command,
        "seed": cfg.get("seed"),
        "inputs": {k: cfg[k] for k in ("data", "val_data", "checkpoint")
                   if cfg.get(k)},
        "out_dir": str(out_dir),
        "config": cfg,
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "manifest.json", "w", encoding="utf-8", newline="\n") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _require_file(path_str: str, what: str) -> Path:
    path = Path(path_str)
    if not path.is_file():
        raise FileNotFoundError(f"{what} not found: {path}")
    return path


def _sidecar_path(data_path: Path) -> Path:
    return data_path.with_suffix(".synth.json")


def _regenerate_from_sidecar(data_path: Path, loaded):
    """Trainable embeddings need the generation record; the dataset file only
    stores frames, so the sidecar's arguments rebuild the full dataset and a
    count/width comparison guards against a swapped file."""
    sidecar = _sidecar_path(data_path)
    if not sidecar.is_file():
        raise ConfigError(
            f"trainable embeddings need the generator sidecar {sidecar}; "
            "only datasets written by `tiedrank synth` support this mode")
    with open(sidecar, "r", encoding="utf-8") as fh:
        args = json.load(fh)["generator"]
    args["t_range"] = tuple(args["t_range"])
    ds = generate_synthetic(**args)
    same = (len(ds.audio_items) == len(loaded.audio_items)
            and len(ds.caption_items) == len(loaded.caption_items)
            and ds.d_audio == loaded.d_audio and ds.d_text == loaded.d_text)
    if not same:
        raise CheckpointError(f"sidecar {sidecar} does not describe {data_path}")
    return ds


def _model_config_from(cfg: dict, d_audio: int, d_text: int) -> ModelConfig:
    overrides = dict(
        n_heads=cfg["n_heads"],
        tied_kind=cfg["tied_kind"],
        tied=not cfg["untied"],
        ffn_mult=cfg["ffn_mult"],
        contrastive_dim=cfg["contrastive_dim"],
        dropout=cfg["dropout"],
    )
    if cfg.get("preset"):
        # the preset owns the architecture shape; remaining flags still apply
        base = preset_config(cfg["preset"], d_audio, d_text)
        if base.tied_kind == "linear":
            overrides["tied_kind"] = "linear"
        return replace(base, **overrides)
    return ModelConfig(d_model=cfg["d_model"], n_layers=cfg["n_layers"],
                       d_audio_in=d_audio, d_text_in=d_text, **overrides)


def _train_config_from(cfg: dict, model_cfg: ModelConfig) -> TrainConfig:
    loss = LossConfig(margin=cfg["margin"],
                      use_contrastive=not cfg["no_contrastive"],
                      use_ranking=not cfg["no_ranking"],
                      negative_strategy=cfg["negative_strategy"])
    return TrainConfig(model=model_cfg, loss=loss,
                       batch_size=cfg["batch_size"], max_epochs=cfg["max_epochs"],
                       lr=cfg["lr"], weight_decay=cfg["weight_decay"],
                       plateau_factor=cfg["plateau_factor"],
                       plateau_patience=cfg["plateau_patience"],
                       early_stop_patience=cfg["early_stop_patience"],
                       seed=cfg["seed"],
                       trainable_embeddings=cfg["trainable_embeddings"])


def _load_and_split(cfg: dict):
    data_path = _require_file(cfg["data"], "dataset")
    ds = load_dataset(data_path)
    if cfg["trainable_embeddings"]:
        ds = _regenerate_from_sidecar(data_path, ds)
    if cfg.get("val_data"):
        val = load_dataset(_require_file(cfg["val_data"], "validation dataset"))
        return ds, val
    if cfg["val_fraction"] == 0.0:
        return ds, ds  # overfit regime: validate on the training set itself
    return split_by_audio(ds, val_fraction=cfg["val_fraction"], seed=cfg["seed"])


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(cfg: dict) -> int:
    out_dir = Path(cfg["out_dir"])
    _write_manifest(out_dir, "synth", cfg)
    args = dict(n_audio=cfg["n_audio"], captions_per_audio=cfg["captions"],
                d_audio=cfg["d_audio"], d_text=cfg["d_text"],
                t_range=(cfg["t_min"], cfg["t_max"]),
                noise_sigma=cfg["sigma"], seed=cfg["seed"],
                identity_maps=cfg["identity_maps"], latent_dim=cfg["latent_dim"])
    ds = generate_synthetic(**args)
    data_path = out_dir / "dataset.jsonl"
    write_dataset(ds, data_path)
    sidecar = {"generator": dict(args, t_range=list(args["t_range"]))}
    with open(_sidecar_path(data_path), "w", encoding="utf-8", newline="\n") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"wrote {len(ds.audio_items)} audio + {len(ds.caption_items)} text "
          f"records to {data_path}")
    return EXIT_OK


def cmd_train(cfg: dict) -> int:
    out_dir = Path(cfg["out_dir"])
    _require_file(cfg["data"], "dataset")
    _write_manifest(out_dir, "train", cfg)
    ds_train, ds_val = _load_and_split(cfg)
    model_cfg = _model_config_from(cfg, ds_train.d_audio, ds_train.d_text)
    train_cfg = _train_config_from(cfg, model_cfg)
    result = train(train_cfg, ds_train, ds_val)

    save_checkpoint(result.best_model, out_dir / "checkpoint.ckpt")
    write_history_csv(result.history, out_dir / "history.csv")
    if result.tuned_train is not None:
        write_dataset(result.tuned_train, out_dir / "tuned_train.jsonl")
        write_dataset(result.tuned_val, out_dir / "tuned_val.jsonl")
    if not cfg["no_figures"] and result.history:
        from .figures import plot_training_curves
        plot_training_curves(result.history, out_dir / "curves.png")
    epochs = len(result.history)
    best = result.best_val_map10
    lr_final = result.state.lr_current
    print(f"trained {epochs} epochs; best val mAP@10 {best:.4f}; "
          f"final lr {lr_final:g}; artifacts in {out_dir}")
    return EXIT_OK


def cmd_eval(cfg: dict) -> int:
    out_dir = Path(cfg["out_dir"])
    ckpt_path = _require_file(cfg["checkpoint"], "checkpoint")
    data_path = _require_file(cfg["data"], "dataset")
    _write_manifest(out_dir, "eval", cfg)
    model = load_checkpoint(ckpt_path)
    ds = load_dataset(data_path)
    if model.config.d_audio_in != ds.d_audio or model.config.d_text_in != ds.d_text:
        raise CheckpointError(
            f"checkpoint expects input widths audio={model.config.d_audio_in} "
            f"text={model.config.d_text_in}, dataset has audio={ds.d_audio} "
            f"text={ds.d_text}")
    report = evaluate(model, ds)
    with open(out_dir / "report.json", "w", encoding="utf-8", newline="\n") as fh:
        fh.write(report.to_json() + "\n")
    if not cfg["no_figures"]:
        from .figures import plot_rank_histogram
        plot_rank_histogram(report, out_dir / "ranks.png")
    print(report.table())
    return EXIT_OK


def cmd_gradcheck(cfg: dict) -> int:
    from .gradcheck import run_and_report
    out_dir = Path(cfg["out_dir"]) if cfg.get("out_dir") else None
    if out_dir is not None:
        _write_manifest(out_dir, "gradcheck", cfg)
    if cfg["debug_flip_sign"]:
        ad.DEBUG_FLIP_LEAF_GRAD = True
    try:
        results, passed, report = run_and_report(
            seed=cfg["seed"], only=cfg["only"] or None, draws=cfg["draws"],
            threshold=cfg["threshold"])
    finally:
        ad.DEBUG_FLIP_LEAF_GRAD = False
    print(report)
    if out_dir is not None:
        with open(out_dir / "gradcheck.txt", "w", encoding="utf-8", newline="\n") as fh:
            fh.write(report + "\n")
    return EXIT_OK if passed else EXIT_GRADCHECK


def cmd_ablate(cfg: dict) -> int:
    out_dir = Path(cfg["out_dir"])
    _require_file(cfg["data"], "dataset")
    _write_manifest(out_dir, "ablate", cfg)
    axes = [_AXIS_FLAGS[a] for a in (cfg["axis"] or list(_AXIS_FLAGS))]
    needs_synth = "trainable_embeddings" in axes
    probe = dict(cfg, trainable_embeddings=needs_synth)
    ds_train, ds_val = _load_and_split(probe)
    model_cfg = _model_config_from(cfg, ds_train.d_audio, ds_train.d_text)
    base = _train_config_from(dict(cfg, trainable_embeddings=False), model_cfg)
    rows = ablation_grid(base, axes, ds_train, ds_val)
    csv_text = ablation_csv(rows)
    with open(out_dir / "ablation.csv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write(csv_text)
    if not cfg["no_figures"]:
        from .figures import plot_ablation
        plot_ablation(rows, out_dir / "ablation.png")
    print(ablation_table(rows))
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _add_out_dir(p, required=True):
    p.add_argument("--out-dir", required=required, help="directory for run artifacts")


def _add_train_flags(p, include_loss=True):
    p.add_argument("--data", required=True, help="dataset file (JSONL)")
    p.add_argument("--val-data", default=None, help="separate validation dataset")
    p.add_argument("--val-fraction", type=float, default=0.2,
                   help="held-out audio fraction; 0 validates on the train set")
    p.add_argument("--preset", choices=sorted(set(PRESETS) | set(PRESET_ALIASES)),
                   default=None, help="named architecture preset")
    p.add_argument("--d-model", type=int, default=192)
    p.add_argument("--n-layers", type=int, default=2)
    p.add_argument("--n-heads", type=int, default=4)
    p.add_argument("--ffn-mult", type=int, default=4)
    p.add_argument("--contrastive-dim", type=int, default=0,
                   help="projection width for the contrastive head (0 = d_model)")
    p.add_argument("--dropout", type=float, default=0.0)
    p.add_argument("--tied-kind", choices=("transformer", "linear"),
                   default="transformer")
    p.add_argument("--untied", action="store_true",
                   help="clone the stack per modality instead of sharing it")
    p.add_argument("--trainable-embeddings", action="store_true",
                   help="also optimize the synthetic generator maps")
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--max-epochs", type=int, default=150)
    p.add_argument("--weight-decay", type=float, default=0.0)
    p.add_argument("--plateau-patience", type=int, default=5)
    p.add_argument("--plateau-factor", type=float, default=0.1)
    p.add_argument("--early-stop-patience", type=int, default=15)
    if include_loss:
        p.add_argument("--margin", type=float, default=1.0)
        p.add_argument("--no-contrastive", action="store_true")
        p.add_argument("--no-ranking", action="store_true")
        p.add_argument("--negative-strategy", choices=("all_in_batch", "random_one"),
                       default="all_in_batch")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-figures", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tiedrank",
        description="Shared-stack cross-modal retrieval: data synthesis, "
                    "training, evaluation, gradient checking, ablations.")
    parser.add_argument("--version", action="version", version=f"tiedrank {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic paired dataset")
    p.add_argument("--n-audio", type=int, required=True)
    p.add_argument("--captions", type=int, default=5, help="captions per audio")
    p.add_argument("--d-audio", type=int, default=48)
    p.add_argument("--d-text", type=int, default=40)
    p.add_argument("--t-min", type=int, default=4)
    p.add_argument("--t-max", type=int, default=12)
    p.add_argument("--sigma", type=float, default=0.1)
    p.add_argument("--latent-dim", type=int, default=None)
    p.add_argument("--identity-maps", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    _add_out_dir(p)

    p = sub.add_parser("train", help="train a retrieval model")
    _add_train_flags(p)
    _add_out_dir(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--no-figures", action="store_true")
    _add_out_dir(p)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--only", action="append", default=None,
                   help="restrict to named group(s); repeatable")
    p.add_argument("--draws", type=int, default=8)
    p.add_argument("--threshold", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--debug-flip-sign", action="store_true",
                   help="fault injection: negate watched-leaf gradients")
    _add_out_dir(p, required=False)

    p = sub.add_parser("ablate", help="train a grid of configuration cells")
    p.add_argument("--axis", action="append", default=None,
                   choices=sorted(_AXIS_FLAGS),
                   help="grid axis; repeatable (default: all axes)")
    _add_train_flags(p)
    _add_out_dir(p)

    return parser


_COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "ablate": cmd_ablate,
}


def _dispatch(command: str, cfg: dict) -> int:
    try:
        return _COMMANDS[command](cfg)
    except (FileNotFoundError, ConfigError) as exc:
        _fail(str(exc))
        return EXIT_USAGE
    except NumericFault as exc:
        _fail(str(exc))
        return EXIT_NUMERIC
    except (DatasetError, CheckpointError, ShapeError, ContractError) as exc:
        _fail(str(exc))
        return EXIT_ARTIFACT


def run_from_manifest(path_str: str, out_dir_override: str = None) -> int:
    path = _require_file(path_str, "manifest")
    with open(path, "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    for key in ("command", "config"):
        if key not in manifest:
            raise CheckpointError(f"manifest {path} lacks the '{key}' field")
    command = manifest["command"]
    if command not in _COMMANDS:
        raise CheckpointError(f"manifest names unknown command {command!r}")
    cfg = dict(manifest["config"])
    if out_dir_override:
        cfg["out_dir"] = out_dir_override
    return _dispatch(command, cfg)


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    if argv and argv[0] == "--from-manifest":
        rerun = argparse.ArgumentParser(prog="tiedrank --from-manifest")
        rerun.add_argument("manifest")
        rerun.add_argument("--out-dir", default=None,
                           help="redirect artifacts (default: manifest's out_dir)")
        ns = rerun.parse_args(argv[1:])
        try:
            return run_from_manifest(ns.manifest, ns.out_dir)
        except FileNotFoundError as exc:
            _fail(str(exc))
            return EXIT_USAGE
        except CheckpointError as exc:
            _fail(str(exc))
            return EXIT_ARTIFACT
    args = build_parser().parse_args(argv)
    cfg = {k: v for k, v in vars(args).items() if k != "command"}
    return _dispatch(args.command, cfg)


if __name__ == "__main__":
    sys.exit(main())
