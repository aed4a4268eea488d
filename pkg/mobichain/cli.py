"""Command-line entry point: one subcommand per pipeline stage, each leaving a run manifest."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, replace
from datetime import date
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from .activity import ActivityChain, read_chains, write_chains
from .checkpoint import load_checkpoint, save_checkpoint
from .config import MobichainConfig, load_config, override
from .const import EXIT_IO, EXIT_OK, EXIT_VALIDATION, VERSION
from .encoding import MaskStrategy, encode_chains, mask_dataset, write_dataset
from .errors import InvalidConfigError, MobichainError
from .ingestion import ingest_traces, load_affinity_table, read_gps_csv, read_pois
from .loss import LossConfig
from .metrics import activity_start_jsd, evaluate, write_histogram_csvs
from .model import ReconstructMode, reconstruct_dataset
from .simgen import build_region_profile, degrade_population, generate_population
from .training import compute_class_weights, evaluate_reconstruction, split_dataset, train_base
from .transfer import run_transfer_loop
from .utils import child_rng, file_digest, resolve_threads, write_jsonl

_LOGGER = logging.getLogger(__name__)

MANIFEST_SUFFIX = ".manifest.json"

MASK_STRATEGY_NAMES: dict[str, MaskStrategy] = {
    "ActivityBased": MaskStrategy.ACTIVITY_BASED,
    "Period": MaskStrategy.PERIOD,
    "TimeSlot": MaskStrategy.TIME_SLOT,
}


class UsageError(MobichainError):
    """ Command line could not be parsed. """


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:
        raise UsageError(f"{self.prog}: {message}")


@dataclass
class RunManifest:
    command: str
    argv: list[str]
    seed: int
    config: dict[str, Any]
    config_digest: str
    inputs: dict[str, str] = field(default_factory=dict)
    outputs: list[str] = field(default_factory=list)
    version: str = VERSION

    def write(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path

    @classmethod
    def read(cls, path: str | Path) -> RunManifest:
        with open(path, encoding="utf-8") as handle:
            data = json.load(handle)
        try:
            return cls(**data)
        except TypeError as err:
            raise InvalidConfigError(f"{path} is not a run manifest: {err}") from err

    def verify_inputs(self) -> None:
        """ Raises if any recorded input changed since the manifest was written. """
        for path, digest in self.inputs.items():
            if file_digest(path) != digest:
                raise InvalidConfigError(f"Input {path} changed since the manifest was written")


@dataclass
class _Command:
    handler: Callable[[argparse.Namespace, MobichainConfig], None]
    inputs: tuple[str, ...]
    outputs: tuple[str, ...]
    manifest_in_dir: bool = False


def _mask_strategy(text: str) -> MaskStrategy:
    if text in MASK_STRATEGY_NAMES:
        return MASK_STRATEGY_NAMES[text]
    try:
        return MaskStrategy(text.lower())
    except ValueError:
        raise argparse.ArgumentTypeError(f"choose from {', '.join(MASK_STRATEGY_NAMES)}") from None


def _fraction(text: str, upper_open: bool = False) -> float:
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"{text!r} is not a number") from None
    if value < 0.0 or value > 1.0 or (upper_open and value == 1.0):
        raise argparse.ArgumentTypeError(f"{value} is outside [0, {'1)' if upper_open else '1]'}")
    return value


def _retention(text: str) -> float:
    return _fraction(text, upper_open=True)


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--seed", type=int, default=None, help="Seed for every random choice (default: config values)")
    parser.add_argument("--threads", type=int, default=None, help="Worker threads (default: MOBICHAIN_THREADS or 1)")
    parser.add_argument("--config", type=Path, default=None, help="TOML or JSON configuration file")
    verbosity = parser.add_mutually_exclusive_group()
    verbosity.add_argument("-v", "--verbose", action="store_true", help="Debug logging")
    verbosity.add_argument("-q", "--quiet", action="store_true", help="Warnings and errors only")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    _add_common(common)

    parser = _Parser(prog="mobichain", description="Activity chain reconstruction and cross-region transfer")
    parser.add_argument("--version", action="version", version=f"%(prog)s {VERSION}")
    parser.add_argument("--from-manifest", type=Path, default=None, help="Re-run the command recorded in a run manifest")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    simgen = sub.add_parser("simgen", parents=[common], help="Sample synthetic chains from a region preset")
    simgen.add_argument("--preset", required=True, help="Shipped preset name or preset JSON file")
    simgen.add_argument("--days", type=int, required=True, help="Consecutive days per agent")
    simgen.add_argument("--agents", type=int, required=True)
    simgen.add_argument("--start-date", type=date.fromisoformat, default=date(2024, 1, 1))
    simgen.add_argument("--degrade", action="store_true", help="Degrade days into fragmentary observations")
    simgen.add_argument("--coverage", type=float, default=None, help="Mean observed share when degrading")
    simgen.add_argument("--truth", type=Path, default=None, help="Also write the complete days here when degrading")
    simgen.add_argument("--out", type=Path, required=True, help="Chain JSONL output")

    ingest = sub.add_parser("ingest", parents=[common], help="Turn GPS traces and POIs into filtered chains")
    ingest.add_argument("--gps", type=Path, required=True, help="CSV with agent_id,timestamp,lat,lon")
    ingest.add_argument("--pois", type=Path, required=True, help="POI JSONL")
    ingest.add_argument("--affinity", type=Path, default=None, help="Category to activity affinity table")
    ingest.add_argument("--timezone", default=None, help="IANA time zone of the traces")
    ingest.add_argument("--stays-out", type=Path, default=None, help="Also write labelled stays as JSONL")
    ingest.add_argument("--out", type=Path, required=True, help="Chain JSONL output")

    encode = sub.add_parser("encode", parents=[common], help="Encode chains into 96-slot sequences")
    encode.add_argument("--chains", type=Path, required=True)
    encode.add_argument("--out", type=Path, required=True, help="Slot dataset JSONL output")
    encode.add_argument("--mask-strategy", type=_mask_strategy, default=None,
                        help="Mask the encoded days with ActivityBased, Period or TimeSlot")
    encode.add_argument("--mask-fraction", type=_fraction, default=None,
                        help="Share of the 96 slots to mask (default: [mask] fraction)")

    train = sub.add_parser("train", parents=[common], help="Train the base model on complete chains")
    train.add_argument("--data", type=Path, required=True, help="Complete chain JSONL")
    train.add_argument("--epochs", type=int, default=None, help="Epoch count; the phase schedule scales with it")
    train.add_argument("--out-dir", type=Path, required=True)

    reconstruct = sub.add_parser("reconstruct", parents=[common], help="Complete fragmentary chains")
    reconstruct.add_argument("--model", type=Path, required=True, help="Model checkpoint")
    reconstruct.add_argument("--chains", type=Path, required=True)
    reconstruct.add_argument("--mode", choices=[str(m) for m in ReconstructMode], default=str(ReconstructMode.SAMPLE))
    reconstruct.add_argument("--temperature", type=float, default=None)
    reconstruct.add_argument("--out", type=Path, required=True)

    transfer = sub.add_parser(
        "transfer", parents=[common], help="Adapt a base model to a target region",
        description="Writes per-iteration checkpoints and synthetic sets, state.json and trajectory.csv with "
                    "columns iteration, jsd_length, jsd_type, jsd_start, jsd_end, jsd_duration and their mean.",
    )
    transfer.add_argument("--base-checkpoint", type=Path, required=True, help="Base model checkpoint")
    transfer.add_argument("--target-chains", type=Path, required=True, help="Filtered target chain JSONL")
    transfer.add_argument("--source", type=Path, default=None, help="Complete source chains to retain from")
    transfer.add_argument("--iterations", type=int, default=None)
    transfer.add_argument("--epochs-per-iter", type=int, default=None, help="Fine-tuning epochs per iteration")
    transfer.add_argument("--retention", type=_retention, default=None,
                          help="Share of the previous training set kept each iteration, in [0, 1)")
    transfer.add_argument("--resume", action="store_true", help="Continue from the state in --out-dir")
    transfer.add_argument("--out-dir", type=Path, required=True)

    for name, help_text in (("evaluate", "JSD report of two chain collections"),
                            ("report", "JSD report plus plot-ready histogram CSVs")):
        command = sub.add_parser(name, parents=[common], help=help_text)
        command.add_argument("--generated", type=Path, required=True)
        command.add_argument("--reference", type=Path, required=True)
        if name == "evaluate":
            command.add_argument("--out", type=Path, default=None, help="Report JSON (default: standard output)")
        else:
            command.add_argument("--out-dir", type=Path, required=True)
    return parser


def _setup_logging(args: argparse.Namespace) -> None:
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(
        level=level,
        stream=sys.stderr,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        force=True,
    )


def _resolve_config(args: argparse.Namespace) -> MobichainConfig:
    config = load_config(args.config)
    threads = resolve_threads(args.threads)
    config = override(config, "train", threads=threads, seed=args.seed)
    config = override(config, "transfer", threads=threads, seed=args.seed)
    config = override(config, "model", seed=args.seed)
    config = override(config, "degrade", seed=args.seed)
    return config


def _seed(args: argparse.Namespace, config: MobichainConfig) -> int:
    return args.seed if args.seed is not None else config.train.seed


def _simgen(args: argparse.Namespace, config: MobichainConfig) -> None:
    seed = _seed(args, config)
    profile = build_region_profile(args.preset)
    chains = generate_population(profile, args.agents, args.days, args.start_date, seed, config.train.threads)
    if args.degrade:
        if args.truth is not None:
            write_chains(args.truth, chains)
        degrade = override(config, "degrade", coverage_mean=args.coverage).degrade
        chains = degrade_population(chains, degrade, seed)
    write_chains(args.out, chains)


def _ingest(args: argparse.Namespace, config: MobichainConfig) -> None:
    ingest_cfg = config.ingest if args.timezone is None else replace(config.ingest, timezone=args.timezone)
    affinity = load_affinity_table(args.affinity) if args.affinity is not None else None
    result = ingest_traces(read_gps_csv(args.gps), read_pois(args.pois, affinity), ingest_cfg, config.train.threads)
    if args.stays_out is not None:
        write_jsonl(args.stays_out, (asdict(stay) for stay in result.stays))
    write_chains(args.out, result.chains)


def _encode(args: argparse.Namespace, config: MobichainConfig) -> None:
    dataset = encode_chains(read_chains(args.chains), config.ingest.travel_cap_minutes)
    if args.mask_strategy is not None or args.mask_fraction is not None:
        strategies = config.mask.strategies if args.mask_strategy is None else (args.mask_strategy,)
        fraction = config.mask.fraction if args.mask_fraction is None else args.mask_fraction
        masked = mask_dataset(dataset, fraction, strategies, child_rng(_seed(args, config)))
        dataset = replace(dataset, tokens=masked.inputs, observed=masked.observed)
        _LOGGER.info("Masked %d days at fraction %.2f", len(dataset), fraction)
    write_dataset(args.out, dataset)


def _train(args: argparse.Namespace, config: MobichainConfig) -> None:
    train_cfg = config.train
    if args.epochs is not None:
        train_cfg = type(train_cfg).scaled(args.epochs, **{
            k: v for k, v in asdict(train_cfg).items() if k not in ("epochs", "warmup_epochs", "phase2_end")
        })
    out_dir = args.out_dir
    dataset = encode_chains(read_chains(args.data), config.ingest.travel_cap_minutes)
    train, validation, test = split_dataset(dataset, train_cfg.split, train_cfg.seed)

    best: dict[str, Any] = {}

    def on_best(params, record) -> None:
        best.update(epoch=record.epoch, val_loss=record.val_loss)
        save_checkpoint(out_dir / "best.ckpt", params, best)

    params, history = train_base(train, train_cfg, config.model, config.loss, validation=validation, on_best=on_best)
    weights = {"class_weights": list(history.class_weights)}
    save_checkpoint(out_dir / "model.ckpt", params, {"best_epoch": history.best_epoch, **weights})
    if best:
        save_checkpoint(out_dir / "best.ckpt", params, {**best, **weights})
    history.write_csv(out_dir / "history.csv")
    if len(test):
        report = evaluate_reconstruction(
            params, test, config.mask.fraction, config.mask.strategies, train_cfg.seed,
            config.mask.temperature, train_cfg.threads, config.to_dict(),
        )
        report.write(out_dir / "report.json")


def _reconstruct(args: argparse.Namespace, config: MobichainConfig) -> None:
    params, _ = load_checkpoint(args.model)
    dataset = encode_chains(read_chains(args.chains), config.ingest.travel_cap_minutes)
    temperature = args.temperature if args.temperature is not None else config.mask.temperature
    rng = np.random.default_rng(_seed(args, config))
    completed = reconstruct_dataset(params, dataset, args.mode, temperature, rng, threads=config.train.threads)
    write_chains(args.out, completed.to_chains())


def _transfer_loss(config: MobichainConfig, extra: dict[str, Any], target: list[ActivityChain]) -> LossConfig:
    """ Fine-tuning loss with the class weights the base model was trained with. """
    if not config.train.auto_class_weights:
        return config.loss
    if extra.get("class_weights"):
        return config.loss.with_class_weights(np.asarray(extra["class_weights"], dtype=np.float64))
    _LOGGER.warning("Base checkpoint stores no class weights; deriving them from the target chains")
    return config.loss.with_class_weights(
        compute_class_weights(encode_chains(target, config.ingest.travel_cap_minutes)))


def _transfer(args: argparse.Namespace, config: MobichainConfig) -> None:
    base, extra = load_checkpoint(args.base_checkpoint)
    transfer_cfg = override(
        config, "transfer",
        max_iterations=args.iterations,
        epochs_per_iteration=args.epochs_per_iter,
        retention_fraction=args.retention,
    ).transfer
    target = read_chains(args.target_chains)
    source = encode_chains(read_chains(args.source)) if args.source is not None else None
    _, state = run_transfer_loop(
        base, target, transfer_cfg, _transfer_loss(config, extra, target), source, args.out_dir, args.resume)
    _LOGGER.info("Best iteration %d of %d written to %s", state.best_iteration, state.iteration, args.out_dir)


def _compare(args: argparse.Namespace, config: MobichainConfig):
    generated, reference = read_chains(args.generated), read_chains(args.reference)
    return generated, reference, evaluate(generated, reference, config.to_dict())


def _evaluate(args: argparse.Namespace, config: MobichainConfig) -> None:
    _, _, report = _compare(args, config)
    if args.out is not None:
        report.write(args.out)
    else:
        sys.stdout.write(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")


def _report(args: argparse.Namespace, config: MobichainConfig) -> None:
    generated, reference, report = _compare(args, config)
    by_activity = activity_start_jsd(generated, reference)
    report = replace(report, extra={"start_jsd_by_activity": {str(code): value for code, value in by_activity.items()}})
    report.write(args.out_dir / "report.json")
    write_histogram_csvs(args.out_dir, generated, reference)


COMMANDS: dict[str, _Command] = {
    "simgen": _Command(_simgen, (), ("out", "truth")),
    "ingest": _Command(_ingest, ("gps", "pois", "affinity"), ("out", "stays_out")),
    "encode": _Command(_encode, ("chains",), ("out",)),
    "train": _Command(_train, ("data",), ("out_dir",), manifest_in_dir=True),
    "reconstruct": _Command(_reconstruct, ("model", "chains"), ("out",)),
    "transfer": _Command(_transfer, ("base_checkpoint", "target_chains", "source"), ("out_dir",), manifest_in_dir=True),
    "evaluate": _Command(_evaluate, ("generated", "reference"), ("out",)),
    "report": _Command(_report, ("generated", "reference"), ("out_dir",), manifest_in_dir=True),
}


def _manifest_path(args: argparse.Namespace, command: _Command) -> Path | None:
    target = getattr(args, command.outputs[0])
    if target is None:
        return None
    if command.manifest_in_dir:
        return Path(target) / "manifest.json"
    return Path(target).with_name(Path(target).name + MANIFEST_SUFFIX)


def _build_manifest(args: argparse.Namespace, argv: Sequence[str], config: MobichainConfig, command: _Command) -> RunManifest:
    inputs = [getattr(args, name) for name in command.inputs if getattr(args, name) is not None]
    if args.config is not None:
        inputs.append(args.config)
    preset = getattr(args, "preset", None)
    if preset is not None and Path(preset).is_file():
        inputs.append(Path(preset))
    outputs = [str(getattr(args, name)) for name in command.outputs if getattr(args, name, None) is not None]
    return RunManifest(
        command=args.command,
        argv=list(argv),
        seed=_seed(args, config),
        config=config.to_dict(),
        config_digest=config.digest,
        inputs={str(path): file_digest(path) for path in inputs},
        outputs=outputs,
    )


def dispatch(argv: Sequence[str]) -> int:
    """
    Parse ``argv`` and run one command.

    Raises:
        MobichainError: On invalid input or configuration
        OSError: On unreadable inputs or unwritable outputs
    """
    args = build_parser().parse_args(list(argv))
    if args.from_manifest is not None:
        manifest = RunManifest.read(args.from_manifest)
        manifest.verify_inputs()
        _LOGGER.info("Re-running %s from %s", manifest.command, args.from_manifest)
        return dispatch(manifest.argv)
    if args.command is None:
        raise UsageError("mobichain: a command is required (see --help)")

    _setup_logging(args)
    command = COMMANDS[args.command]
    config = _resolve_config(args)
    manifest_path = _manifest_path(args, command)
    if manifest_path is not None:
        _build_manifest(args, argv, config, command).write(manifest_path)
    command.handler(args, config)
    _LOGGER.info("%s finished", args.command)
    return EXIT_OK


def main(argv: Sequence[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        return dispatch(argv)
    except MobichainError as err:
        _LOGGER.error("%s", err)
        return EXIT_VALIDATION
    except ValueError as err:
        _LOGGER.error("Invalid input: %s", err)
        return EXIT_VALIDATION
    except OSError as err:
        _LOGGER.error("I/O failure: %s", err)
        return EXIT_IO
