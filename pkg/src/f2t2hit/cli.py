"""Command-line entry point: train, eval, infer, synthesize, verify.

Configuration is a JSON document with sections {model, train, data} plus a
top-level variant. Any field can be overridden from the command line with
dotted flags, e.g. `--train.total_iters 10` or `--model.base_width 8`;
values are parsed as JSON literals when possible. The resolved effective
configuration is echoed before a command acts. Exit codes: 0 success,
1 runtime failure, 2 usage or config error.
"""

import argparse
import json
import os
import sys
from dataclasses import asdict

import numpy as np
import torch

from .data import (
    BETA_RANGE,
    DatasetSpec,
    SIGMA_RANGE,
    SynthesisParams,
    list_images,
    load_eval_pairs,
    load_image,
    load_training_triples,
    save_image,
    synthesize_pair,
)
from .errors import ConfigError, DatasetError
from .metrics import evaluate_dataset
from .network import VARIANTS, ModelConfig, load_model_checkpoint
from .training import TrainConfig, fit
from .verify import CHECK_GROUPS, run_checks

SEED_ENV_VAR = "F2T2HIT_SEED"

_DATA_DEFAULTS = {
    "root": None,
    "blended_dirname": "blended",
    "transmission_dirname": "transmission",
    "rng_seed": 0,
}


def default_config():
    return {
        "model": asdict(ModelConfig()),
        "train": asdict(TrainConfig()),
        "data": dict(_DATA_DEFAULTS),
        "variant": "full",
    }


def _merge_section(effective, section, updates, origin, explicit):
    known = effective[section]
    for key, value in updates.items():
        if key not in known:
            raise ConfigError(
                f"{origin}: unknown key {section}.{key}")
        known[key] = value
        explicit.add(f"{section}.{key}")


def _merge_document(effective, document, origin, explicit):
    if not isinstance(document, dict):
        raise ConfigError(f"{origin}: top level must be a JSON object")
    for section, value in document.items():
        if section == "variant":
            if value not in VARIANTS:
                raise ConfigError(
                    f"{origin}: variant must be one of {', '.join(VARIANTS)}")
            effective["variant"] = value
            explicit.add("variant")
        elif section in ("model", "train", "data"):
            if not isinstance(value, dict):
                raise ConfigError(f"{origin}: section {section} must be an object")
            _merge_section(effective, section, value, origin, explicit)
        else:
            raise ConfigError(f"{origin}: unknown section {section!r}")


def parse_override_tokens(tokens):
    """Turn leftover `--section.key value` pairs into nested updates."""
    updates = {}
    index = 0
    while index < len(tokens):
        token = tokens[index]
        if not (token.startswith("--") and "." in token):
            raise ConfigError(f"unrecognized argument {token!r}")
        path = token[2:]
        if "=" in path:
            path, raw = path.split("=", 1)
        else:
            index += 1
            if index >= len(tokens):
                raise ConfigError(f"override {token!r} is missing a value")
            raw = tokens[index]
        section, _, key = path.partition(".")
        if not key or "." in key:
            raise ConfigError(f"override {token!r} must look like --section.key")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        updates.setdefault(section, {})[key] = value
        index += 1
    return updates


def _collapse_schedule(effective, layer_explicit):
    # setting total_iters without periods implies a single cosine period
    if ("train.total_iters" in layer_explicit
            and "train.periods" not in layer_explicit
            and "train.restart_weights" not in layer_explicit):
        effective["train"]["periods"] = [effective["train"]["total_iters"]]
        effective["train"]["restart_weights"] = [1.0]


def resolve_config(args, extras):
    """defaults <- config file <- dotted overrides <- seed env var."""
    effective = default_config()
    file_explicit = set()
    if getattr(args, "config", None):
        with open(args.config) as handle:
            document = json.load(handle)
        _merge_document(effective, document, args.config, file_explicit)
    _collapse_schedule(effective, file_explicit)

    cli_explicit = set()
    overrides = parse_override_tokens(extras)
    _merge_document(effective, overrides, "command line", cli_explicit)
    if getattr(args, "variant", None):
        effective["variant"] = args.variant
        cli_explicit.add("variant")
    _collapse_schedule(effective, cli_explicit)

    env_seed = os.environ.get(SEED_ENV_VAR)
    if env_seed is not None:
        try:
            seed = int(env_seed)
        except ValueError:
            raise ConfigError(f"{SEED_ENV_VAR} must be an integer, got {env_seed!r}")
        effective["train"]["seed"] = seed
        effective["data"]["rng_seed"] = seed
    return effective, file_explicit | cli_explicit


def _materialize(effective):
    model_cfg = ModelConfig(**effective["model"])
    train_cfg = TrainConfig(**effective["train"])
    data = dict(effective["data"])
    resolved = {
        "model": asdict(model_cfg),
        "train": asdict(train_cfg),
        "data": data,
        "variant": effective["variant"],
    }
    return model_cfg, train_cfg, data, resolved


def _echo(resolved):
    print(json.dumps(resolved, indent=2, default=list))


def cmd_train(args, extras):
    effective, _ = resolve_config(args, extras)
    if args.data:
        effective["data"]["root"] = args.data
    model_cfg, train_cfg, data, resolved = _materialize(effective)
    _echo(resolved)
    if not data["root"]:
        raise ConfigError("no training data directory (set --data or data.root)")
    triples = load_training_triples(data["root"])
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "effective_config.json"), "w") as handle:
        json.dump(resolved, handle, indent=2, default=list)
        handle.write("\n")
    state = fit(model_cfg, train_cfg, effective["variant"], triples,
                out_dir=args.out, resume=args.resume)
    last = state.loss_history[-1][2] if state.loss_history else float("nan")
    print(f"trained {state.iteration} iterations; final loss {last:.6f}")
    return 0


def cmd_eval(args, extras):
    effective, _ = resolve_config(args, extras)
    if args.data:
        effective["data"]["root"] = args.data
    _, _, data, resolved = _materialize(effective)
    _echo(resolved)
    if not data["root"]:
        raise ConfigError("no dataset directory (set --data or data.root)")
    model, _, _ = load_model_checkpoint(args.checkpoint)
    pairs = load_eval_pairs(DatasetSpec(
        data["root"], data["blended_dirname"], data["transmission_dirname"]))
    report = evaluate_dataset(model, pairs, dataset_name=data["root"])
    os.makedirs(args.out, exist_ok=True)
    report.write_csv(os.path.join(args.out, "report.csv"))
    report.write_json(os.path.join(args.out, "report.json"))
    print(f"evaluated {report.count} images: "
          f"psnr {report.mean_psnr:.4f} dB, ssim {report.mean_ssim:.4f}")
    return 0


def cmd_infer(args, extras):
    effective, _ = resolve_config(args, extras)
    _, _, _, resolved = _materialize(effective)
    _echo(resolved)
    model, _, _ = load_model_checkpoint(args.checkpoint)
    model.eval()
    if os.path.isdir(args.input):
        names = list_images(args.input)
        if not names:
            raise DatasetError(f"no images found in {args.input}")
        paths = [os.path.join(args.input, name) for name in names]
    else:
        if not os.path.isfile(args.input):
            raise FileNotFoundError(args.input)
        paths = [args.input]
    os.makedirs(args.out, exist_ok=True)
    produced = 0
    for path in paths:
        try:
            image = load_image(path)
        except Exception as exc:
            print(f"warning: skipping {path}: {exc}", file=sys.stderr)
            continue
        with torch.no_grad():
            restored = model(image.unsqueeze(0)).squeeze(0)
        stem = os.path.splitext(os.path.basename(path))[0]
        out_path = os.path.join(args.out, f"{stem}_dereflected.png")
        save_image(out_path, restored)
        print(out_path)
        produced += 1
    return 0 if produced else 1


def cmd_synthesize(args, extras):
    effective, _ = resolve_config(args, extras)
    _, _, data, resolved = _materialize(effective)
    _echo(resolved)
    t_names = list_images(args.transmission)
    r_names = list_images(args.reflection)
    if not t_names or not r_names:
        raise DatasetError("both transmission and reflection dirs need images")
    count = min(len(t_names), len(r_names))
    seed = int(data["rng_seed"])
    for sub in ("blended", "transmission", "reflection"):
        os.makedirs(os.path.join(args.out, sub), exist_ok=True)
    manifest = []
    for index in range(count):
        rng = np.random.default_rng([seed, index])
        beta = args.beta if args.beta is not None else float(
            rng.uniform(*BETA_RANGE))
        sigma = args.sigma if args.sigma is not None else float(
            rng.uniform(*SIGMA_RANGE))
        params = SynthesisParams(beta=beta, sigma=sigma, rng_seed=seed)
        transmission = load_image(os.path.join(args.transmission, t_names[index]))
        reflection = load_image(os.path.join(args.reflection, r_names[index]))
        if reflection.shape != transmission.shape:
            raise DatasetError(
                f"pair {index}: {t_names[index]} {tuple(transmission.shape)} vs "
                f"{r_names[index]} {tuple(reflection.shape)}")
        triple = synthesize_pair(transmission, reflection, params)
        name = f"pair_{index:04d}.png"
        save_image(os.path.join(args.out, "blended", name), triple.blended)
        save_image(os.path.join(args.out, "transmission", name), triple.transmission)
        save_image(os.path.join(args.out, "reflection", name), triple.reflection)
        manifest.append({
            "name": name,
            "transmission": t_names[index],
            "reflection": r_names[index],
            "beta": beta,
            "sigma": sigma,
            "seed": seed,
        })
    with open(os.path.join(args.out, "manifest.json"), "w") as handle:
        json.dump({"pairs": manifest}, handle, indent=2)
        handle.write("\n")
    print(f"synthesized {count} pairs under {args.out}")
    return 0


def cmd_verify(args, extras):
    effective, _ = resolve_config(args, extras)
    _, _, _, resolved = _materialize(effective)
    _echo(resolved)
    results = run_checks(scope=args.scope,
                         inject_gradient_fault=args.inject_gradient_fault)
    for result in results:
        status = "PASS" if result.passed else "FAIL"
        print(f"{status} {result.name}: {result.detail}")
    all_passed = all(r.passed for r in results)
    if args.report:
        payload = {"passed": all_passed,
                   "results": [r.as_dict() for r in results]}
        with open(args.report, "w") as handle:
            json.dump(payload, handle, indent=2)
            handle.write("\n")
    print(f"{sum(r.passed for r in results)}/{len(results)} checks passed")
    return 0 if all_passed else 1


def build_parser():
    parser = argparse.ArgumentParser(
        prog="f2t2hit",
        description="Single-image reflection removal: training, evaluation, "
                    "inference, data synthesis, and numerical verification.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--variant", choices=VARIANTS,
                       help="architecture variant override")

    p = sub.add_parser("train", help="train a model")
    common(p)
    p.add_argument("--data", help="paired dataset directory")
    p.add_argument("--out", required=True, help="run output directory")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a paired dataset")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="paired dataset directory")
    p.add_argument("--out", default=".", help="where to write report.csv/json")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="remove reflections from images")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="image file or directory")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("synthesize", help="blend reflection pairs")
    common(p)
    p.add_argument("--transmission", required=True)
    p.add_argument("--reflection", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--beta", type=float, help="fixed reflection strength")
    p.add_argument("--sigma", type=float, help="fixed reflection blur")
    p.set_defaults(func=cmd_synthesize)

    p = sub.add_parser("verify", help="run the numerical verification suite")
    common(p)
    p.add_argument("--scope", choices=CHECK_GROUPS,
                   help="run only one check group")
    p.add_argument("--report", help="write a JSON report here")
    p.add_argument("--inject-gradient-fault", action="store_true",
                   help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None):
    parser = build_parser()
    args, extras = parser.parse_known_args(argv)
    try:
        return args.func(args, extras)
    except json.JSONDecodeError as exc:
        print(f"error: config parse failure at line {exc.lineno}: {exc.msg}",
              file=sys.stderr)
        return 2
    except (ConfigError, DatasetError, FileNotFoundError, NotADirectoryError,
            IsADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
