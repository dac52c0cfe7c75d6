# maxprop/commands.py
"""
Command layer behind the CLI verbs. Every command returns a report dict with an
``exit_code``; failures are caught here, logged, and mapped to the exit-code
contract (0 ok, 1 usage/config, 2 IO/dataset, 3 gradient-check failure).
"""
import itertools
import logging
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import pandas as pd

from .blocks import JteSpec, build_model
from .config import RunConfig, dump_run_config, load_run_config, parse_manifest
from .curves import merge_curves, plot_curves, write_curves
from .data import AugmentConfig, Dataset, load_cifar_binary, load_idx, synthetic_dataset
from .ensemble import EnsembleEvaluator, EnsembleMember, EnsembleSpec, Voting
from .errors import DatasetFormatError, MaxPropError
from .gradcheck import GradientChecker
from .tensor import Rng
from .training import INIT_STREAM, Trainer, evaluate, compare_runs, read_metrics, summarize_seeds, write_metrics
from .weights import load_into, save_weights

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_IO = 2
EXIT_GRADCHECK = 3

METRICS_FILE = "metrics.csv"
WEIGHTS_FILE = "final_weights.bin"
CONFIG_SNAPSHOT = "resolved_config.ini"
RESULTS_FILE = "results.jsonl"
CHART_SUFFIXES = (".png", ".pdf", ".svg")


def exit_code_for(error: BaseException) -> int:
    if isinstance(error, (OSError, DatasetFormatError)):
        return EXIT_IO
    return EXIT_USAGE


def open_datasets(cfg: RunConfig) -> Tuple[Dataset, Dataset]:
    """(train, test) datasets for a run, subsets applied."""
    ds = cfg.dataset
    if ds.kind == "synthetic":
        common = dict(num_classes=ds.synthetic_classes, channels=ds.synthetic_channels, size=ds.synthetic_size)
        train = synthetic_dataset(ds.synthetic_train, seed=ds.synthetic_seed, name="synthetic_train", **common)
        test = synthetic_dataset(ds.synthetic_test, seed=ds.synthetic_seed + 1, name="synthetic_test", **common)
    elif ds.kind == "fashion_mnist":
        train = load_idx(ds.train_images, ds.train_labels, name="fashion_mnist_train")
        test = load_idx(ds.test_images, ds.test_labels, name="fashion_mnist_test")
    else:
        fine = ds.kind == "cifar100"
        train = load_cifar_binary(ds.train_files, fine_labels=fine, name=f"{ds.kind}_train")
        test = load_cifar_binary(ds.test_files, fine_labels=fine, name=f"{ds.kind}_test")
    if ds.train_subset:
        train = train.head(ds.train_subset)
    if ds.test_subset:
        test = test.head(ds.test_subset)
    return train, test


def augment_config(cfg: RunConfig) -> AugmentConfig:
    """Dataset augmentation; JTE runs always flip horizontally."""
    return AugmentConfig.for_channels(
        cfg.dataset.channels, max_shift=cfg.dataset.max_shift, flip_horizontal=cfg.dataset.flip_horizontal or cfg.network.jte
    )


def combiner_label(cfg: RunConfig) -> str:
    spec = cfg.model_spec()
    if isinstance(spec, JteSpec):
        return "jte"
    if spec.schedule.value == "alternating":
        return "alternating"
    return spec.combiner.describe()


def build_run_model(cfg: RunConfig):
    return build_model(cfg.model_spec(), Rng(cfg.seed).fork(INIT_STREAM), cfg.train.precision)


def train_run(cfg: RunConfig) -> Dict[str, Any]:
    """Trains one configured run and writes its metrics, weights and config snapshot."""
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / CONFIG_SNAPSHOT).write_text(dump_run_config(cfg), encoding="utf-8")
    train, test = open_datasets(cfg)
    model = build_run_model(cfg)
    trainer = Trainer(cfg.train, augment_config(cfg), name=f"Trainer[{cfg.name}/seed{cfg.seed}]")
    records = trainer.train(model, train, test)
    write_metrics(records, out / METRICS_FILE)
    save_weights(model, out / WEIGHTS_FILE)
    last = records[-1] if records else None
    return {
        "run": cfg.name,
        "seed": cfg.seed,
        "output_dir": str(out),
        "epochs": len(records),
        "val_acc": last.val_acc if last else None,
        "diverged": bool(last.diverged) if last else False,
    }


class ExperimentRunner:
    """
    Dispatches the CLI verbs. ``function_map`` maps each verb to its command.
    """

    def __init__(self, name: str = "ExperimentRunner"):
        self.name = name
        self.function_map: Dict[str, Callable[..., Dict[str, Any]]] = {
            "train": self.train,
            "eval": self.evaluate,
            "ensemble": self.ensemble,
            "gradcheck": self.gradcheck,
            "curves": self.curves,
        }
        logger.info(f"Initialized {self.name}")

    def execute(self, verb: str, **kwargs) -> Dict[str, Any]:
        if verb not in self.function_map:
            logger.error(f"{self.name}: unknown command '{verb}'")
            return {"source": self.name, "type": verb, "error": f"unknown command '{verb}'", "exit_code": EXIT_USAGE}
        try:
            return self.function_map[verb](**kwargs)
        except (MaxPropError, OSError, ValueError) as e:
            logger.error(f"{self.name}: {verb} failed: {e}", exc_info=True)
            return {"source": self.name, "type": verb, "error": str(e), "exit_code": exit_code_for(e)}

    # --- train ---

    def train(
        self,
        config: Optional[str] = None,
        manifest: Optional[str] = None,
        seed: Optional[int] = None,
        out: Optional[str] = None,
        overrides: Sequence[str] = (),
    ) -> Dict[str, Any]:
        """Trains a single config, or every run x seed of a manifest."""
        if manifest:
            return self._train_manifest(manifest, overrides)
        if not config:
            raise ValueError("train needs --config or --manifest")
        cfg = load_run_config(config, overrides, seed=seed, output_dir=out)
        logger.info(f"{self.name}: training '{cfg.name}' ({combiner_label(cfg)}) seed {cfg.seed} -> {cfg.output_dir}")
        result = train_run(cfg)
        if result["diverged"]:
            logger.warning(f"{self.name}: run '{cfg.name}' diverged after {result['epochs']} epochs")
        return {"source": self.name, "type": "train_report", "runs": [result], "exit_code": EXIT_OK}

    def _train_manifest(self, manifest_path: str, overrides: Sequence[str]) -> Dict[str, Any]:
        manifest = parse_manifest(manifest_path)
        configs: List[RunConfig] = []
        for run in manifest.runs:
            for seed in run.seeds:
                configs.append(manifest.load(run, seed, overrides))
        logger.info(f"{self.name}: manifest {manifest_path}: {len(configs)} runs on {manifest.workers} worker(s)")
        if manifest.workers > 1:
            with ProcessPoolExecutor(max_workers=manifest.workers) as pool:
                results = list(pool.map(train_run, configs))
        else:
            results = [train_run(cfg) for cfg in configs]

        frame = pd.DataFrame(results)
        summaries = {}
        for run, group in frame.groupby("run", sort=False):
            accuracies = group["val_acc"].fillna(0.0).tolist()
            summaries[run] = summarize_seeds(accuracies)
            summaries[run]["diverged"] = int(group["diverged"].sum())
            logger.info(f"{self.name}: {run}: val_acc {summaries[run]['mean']:.4f} ± {summaries[run]['std']:.4f} "
                        f"over {summaries[run]['n']} seeds")
        comparisons = []
        for a, b in itertools.combinations(summaries, 2):
            comparison = compare_runs(summaries[a]["values"], summaries[b]["values"])
            comparisons.append({"a": a, "b": b, **comparison})
        Path(manifest.output_dir).mkdir(parents=True, exist_ok=True)
        frame.to_csv(Path(manifest.output_dir) / "seed_results.csv", index=False)
        return {
            "source": self.name,
            "type": "train_report",
            "runs": results,
            "summaries": summaries,
            "comparisons": comparisons,
            "exit_code": EXIT_OK,
        }

    # --- eval ---

    def evaluate(
        self,
        config: str,
        weights: Optional[str] = None,
        dataset: str = "test",
        seed: Optional[int] = None,
        out: Optional[str] = None,
        overrides: Sequence[str] = (),
        results: Optional[str] = None,
    ) -> Dict[str, Any]:
        """Evaluates saved weights and appends one JSON line to the results file."""
        if dataset not in ("train", "test"):
            raise ValueError(f"dataset must be 'train' or 'test', got {dataset!r}")
        cfg = load_run_config(config, overrides, seed=seed, output_dir=out)
        weights = weights or str(Path(cfg.output_dir) / WEIGHTS_FILE)
        model = load_into(build_run_model(cfg), weights)
        train, test = open_datasets(cfg)
        data = test if dataset == "test" else train
        k = min(5, data.num_classes)
        loss, top1, topk = evaluate(model, data, k=k, augment_cfg=augment_config(cfg))
        metrics_path = Path(weights).parent / METRICS_FILE
        diverged = bool(read_metrics(metrics_path)["diverged"].iloc[-1]) if metrics_path.exists() else False
        record = {
            "run": cfg.name,
            "seed": cfg.seed,
            "dataset": data.name,
            "combiner": combiner_label(cfg),
            "top1": top1,
            "top5": topk,
            "diverged": diverged,
        }
        results_path = Path(results) if results else Path(cfg.output_dir) / RESULTS_FILE
        results_path.parent.mkdir(parents=True, exist_ok=True)
        with open(results_path, "a", encoding="utf-8") as handle:
            handle.write(pd.DataFrame([record]).to_json(orient="records", lines=True).strip() + "\n")
        logger.info(f"{self.name}: {cfg.name} seed {cfg.seed} on {data.name}: loss {loss:.4f} top1 {top1:.4f} top5 {topk:.4f}")
        return {"source": self.name, "type": "eval_report", "loss": loss, **record, "results_file": str(results_path),
                "exit_code": EXIT_OK}

    # --- ensemble ---

    def ensemble(self, manifest: str, voting: str = "majority", dataset: str = "test") -> Dict[str, Any]:
        """Votes over every run x seed of a manifest using their saved weights."""
        parsed = parse_manifest(manifest)
        members, models, first = [], [], None
        for run in parsed.runs:
            for seed in run.seeds:
                cfg = parsed.load(run, seed)
                first = first or cfg
                weights = Path(cfg.output_dir) / WEIGHTS_FILE
                if not weights.exists():
                    raise FileNotFoundError(f"Ensemble member '{run.name}' seed {seed} has no weights at {weights}")
                models.append(load_into(build_run_model(cfg), weights))
                members.append(EnsembleMember(cfg.model_spec(), seed, name=f"{run.name}/seed{seed}"))
        spec = EnsembleSpec(tuple(members), Voting(voting))
        train, test = open_datasets(first)
        report = EnsembleEvaluator().evaluate(spec, models, test if dataset == "test" else train, augment_config(first))
        if "error" in report:
            report["exit_code"] = exit_code_for(report.pop("exception"))
        else:
            report["exit_code"] = EXIT_OK
        return report

    # --- gradcheck ---

    def gradcheck(self, scope: Optional[str] = None, trials: int = 100, seed: int = 0, inject_fault: bool = False) -> Dict[str, Any]:
        report = GradientChecker(trials=trials, seed=seed, inject_fault=inject_fault).run(scope)
        if "error" in report:
            report["exit_code"] = exit_code_for(report.pop("exception"))
        else:
            report["exit_code"] = EXIT_OK if report["passed"] else EXIT_GRADCHECK
        return report

    # --- curves ---

    def curves(self, csv_paths: Sequence[str], out: str, chart: Optional[str] = None) -> Dict[str, Any]:
        """Writes merged long-format curves; an image ``out`` also gets a CSV next to it."""
        frame = merge_curves(csv_paths)
        out_path = Path(out)
        if out_path.suffix.lower() in CHART_SUFFIXES:
            chart, out_path = str(out_path), out_path.with_suffix(".csv")
        out_path.parent.mkdir(parents=True, exist_ok=True)
        write_curves(frame, out_path)
        if chart:
            plot_curves(frame, chart)
        return {
            "source": self.name,
            "type": "curves_report",
            "runs": frame["run"].unique().tolist(),
            "csv": str(out_path),
            "chart": chart,
            "exit_code": EXIT_OK,
        }
