"""
Command-line entry point: `ragforget <command> [options]`
"""
import argparse
import json
import logging
import os
import sys

from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence

import numpy as np

from .backbone import BackboneKind, BackboneModel, train_backbone
from .config import RunConfig, derive_seed
from .corpus import CategoryMap, Dataset, ItemMetadata, SplitBundle, load_interactions, load_item_metadata, \
    load_user_profiles, make_splits
from .evaluation import CSV_HEADER, BenchContext, MissingCheckpointError, TimingMode, TimingOutcome, \
    backbone_rankings, build_perf_matrix, compare_forget_remain, compare_strategies, evaluate_run, format_timing, \
    holdout_targets, time_unlearning
from .generator import BackendKind, create_backend
from .pipeline import UnlearningOrchestrator
from .promptgen import AuxContext, LeakageDetectedError
from .reporting import ArtifactWriter, UnlearningRunResult, format_table, write_csv, write_json
from .retrieval import ForgetRequest, Strategy, load_forget_requests, resolve_forget_pairs, save_forget_requests
from .retrieval.diversity import PerfMatrix

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_LEAKAGE = 2

SPLITS_DIR = "splits"
SOURCES_FILE = "sources.json"
MODELS_DIR = "models"
REPORTS_DIR = "reports"
BENCH_DIR = "bench"

STRATEGY_CHOICES = [s.value for s in Strategy if s is not Strategy.UNLEARN_ONLY]
BACKEND_CHOICES = ["remote", "mock-identity", "mock-similarity"]


class Workspace:
    """
    Resolves and loads the artifacts a run shares through its output directory: splits, checkpoints, item
    metadata and the cached performance matrix
    """

    def __init__(self, config: RunConfig) -> None:
        self._config = config

    @property
    def config(self) -> RunConfig:
        return self._config

    def path(self, *parts: str) -> str:
        return os.path.join(self._config.out_dir, *parts)

    @property
    def checkpoint_path(self) -> str:
        return self.path(MODELS_DIR, f"{self._config.backbone.value}.ckpt")

    def load_bundle(self) -> SplitBundle:
        return SplitBundle.load(self.path(SPLITS_DIR))

    def load_model(self) -> BackboneModel:
        """
        :raises MissingCheckpointError: if `train` has not been run for the configured backbone
        """
        if not os.path.isfile(self.checkpoint_path):
            raise MissingCheckpointError(self.checkpoint_path)
        return BackboneModel.load(self.checkpoint_path)

    def _sources(self) -> Dict[str, Any]:
        path = self.path(SPLITS_DIR, SOURCES_FILE)
        if not os.path.isfile(path):
            return {}
        with open(path, "r", encoding="utf-8") as stream:
            content: Dict[str, Any] = json.load(stream)
        return content

    def load_metadata(self) -> ItemMetadata:
        """
        :return: item metadata from the configured file, else from the file `prepare` recorded; without either,
            every item falls into the "unknown" category
        """
        sources = self._sources()
        path = self._config.items_path or sources.get("items_path")
        fmt = self._config.items_format if self._config.items_path else sources.get("items_format", "movielens_item")
        if not path:
            log.warning("no item metadata configured; all items are uncategorized")
            return ItemMetadata(CategoryMap.from_items({}))
        return load_item_metadata(path, fmt)

    def load_profiles(self) -> Dict[int, str]:
        sources = self._sources()
        path = self._config.users_path or sources.get("users_path")
        fmt = self._config.users_format if self._config.users_path else sources.get("users_format", "movielens_user")
        return load_user_profiles(path, fmt) if path else {}

    def load_perf_matrix(self, required: bool) -> Optional[PerfMatrix]:
        """
        :raises FileNotFoundError: if required and `perf-matrix` has not been run
        """
        path = self._config.resolved_perf_matrix_path
        if os.path.isfile(path):
            return PerfMatrix.load(path)
        if required:
            raise FileNotFoundError(f"{path} (run `ragforget perf-matrix` first)")
        return None

    def orchestrator(self, model: BackboneModel, store: Dataset, metadata: ItemMetadata,
                     strategy: Optional[Strategy] = None) -> UnlearningOrchestrator:
        cfg = self._config
        settings = cfg.pipeline_settings(strategy)
        return UnlearningOrchestrator(model, store, metadata.categories, AuxContext.from_metadata(metadata),
                                      create_backend(cfg.backend_config(), model), settings,
                                      self.load_perf_matrix(settings.strategy is Strategy.DIVERSITY),
                                      self.load_profiles(), cfg.jobs)


def deployed_data(bundle: SplitBundle) -> Dataset:
    """:return: the data the deployed backbone is trained on and histories are retrieved from"""
    return bundle.train.union(bundle.forget)


def _check_leakage(result: UnlearningRunResult) -> None:
    if result.leaks:
        first = result.leaks[0]
        raise LeakageDetectedError(first.user_id, first.leaked_ids)


def cmd_prepare(args: argparse.Namespace, workspace: Workspace) -> int:
    cfg = workspace.config
    if not cfg.ratings_path:
        raise ValueError("a ratings file is required (--ratings or ratings_path in the config)")
    cfg.check_paths()
    data = load_interactions(cfg.ratings_path, cfg.ratings_format)
    if cfg.items_path:
        load_item_metadata(cfg.items_path, cfg.items_format)
    if cfg.users_path:
        load_user_profiles(cfg.users_path, cfg.users_format)
    bundle = make_splits(data, cfg.ratios, cfg.forget_fraction, cfg.split_seed)
    manifest_path = bundle.save(workspace.path(SPLITS_DIR))
    sources = {
        "dataset_name": cfg.dataset_name,
        "ratings_path": os.path.abspath(cfg.ratings_path),
        "ratings_format": cfg.ratings_format,
        "items_path": os.path.abspath(cfg.items_path) if cfg.items_path else None,
        "items_format": cfg.items_format,
        "users_path": os.path.abspath(cfg.users_path) if cfg.users_path else None,
        "users_format": cfg.users_format,
    }
    write_json(workspace.path(SPLITS_DIR, SOURCES_FILE), sources)
    print(format_table(("split", "interactions", "users"),
                       [(name, len(bundle.split(name)), len(bundle.split(name).user_index))
                        for name in ("train", "val", "test", "forget")]), end="")
    print(f"manifest: {manifest_path}")
    return EXIT_OK


def cmd_train(args: argparse.Namespace, workspace: Workspace) -> int:
    cfg = workspace.config
    bundle = workspace.load_bundle()
    model = train_backbone(cfg.backbone, deployed_data(bundle), cfg.backbone_config())
    model.save(workspace.checkpoint_path)
    print(f"{cfg.backbone.value} checkpoint: {workspace.checkpoint_path} (sha256 {model.checksum()})")
    return EXIT_OK


def cmd_recommend(args: argparse.Namespace, workspace: Workspace) -> int:
    bundle = workspace.load_bundle()
    model = workspace.load_model()
    store = deployed_data(bundle)
    users = args.users or store.users
    orchestrator = workspace.orchestrator(model, store, workspace.load_metadata())
    orchestrator.add_listener(ArtifactWriter(workspace.path("recommend")))
    result = orchestrator.run(users, frozenset(), run_name="recommend")
    _check_leakage(result)
    return EXIT_ERROR if result.failures else EXIT_OK


def cmd_unlearn(args: argparse.Namespace, workspace: Workspace) -> int:
    requests = load_forget_requests(args.requests)
    if not requests:
        log.info("%s holds no forget requests; nothing to do", args.requests)
        return EXIT_OK
    bundle = workspace.load_bundle()
    model = workspace.load_model()
    before = model.checksum()
    store = deployed_data(bundle)
    pairs = resolve_forget_pairs(requests, store)
    users = sorted({request.user_id for request in requests})
    orchestrator = workspace.orchestrator(model, store, workspace.load_metadata())
    orchestrator.add_listener(ArtifactWriter(workspace.path("unlearn")))
    result = orchestrator.run(users, pairs, run_name="unlearn")
    if model.checksum() != before:
        raise RuntimeError("backbone embeddings changed during unlearning")
    _check_leakage(result)
    print(f"served {len(result.outcomes)} of {len(users)} users; leaked items: {result.leaked_item_count}")
    return EXIT_ERROR if result.failures else EXIT_OK


def perf_grid(step: int) -> List[int]:
    return sorted(set(range(0, 101, step)) | {100})


def cmd_perf_matrix(args: argparse.Namespace, workspace: Workspace) -> int:
    cfg = workspace.config
    bundle = workspace.load_bundle()
    model = workspace.load_model()
    metadata = workspace.load_metadata()
    backend = create_backend(cfg.backend_config(), model) if cfg.backend is BackendKind.REMOTE else None
    matrix = build_perf_matrix(bundle.val, metadata.categories, model, perf_grid(cfg.grid_step), cfg.perf_seed,
                               history=bundle.train, num_candidates=cfg.num_candidates, backend=backend,
                               aux=AuxContext.from_metadata(metadata), parallelism=cfg.jobs)
    matrix.save(cfg.resolved_perf_matrix_path)
    print(format_table(["category"] + [f"{p}%" for p in matrix.grid],
                       [[label] + list(row) for label, row in zip(matrix.categories, matrix.values)]), end="")
    print(f"performance matrix: {cfg.resolved_perf_matrix_path}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace, workspace: Workspace) -> int:
    cfg = workspace.config
    bundle = workspace.load_bundle()
    model = workspace.load_model()
    metadata = workspace.load_metadata()
    store = deployed_data(bundle)
    forget = bundle.forget.pairs
    users = sorted(set(bundle.test.users) | set(bundle.forget.users))
    result = workspace.orchestrator(model, store, metadata).run(users, forget, run_name="eval")
    _check_leakage(result)
    remain, forgotten = evaluate_run(result.ranked, bundle.test, forget, cfg.all_ks, cfg.digest())
    reports = workspace.path(REPORTS_DIR)
    method = f"cragru-{cfg.strategy.value}"
    csv_rows = remain.csv_rows(method, cfg.dataset_name, cfg.backbone.value)
    write_json(os.path.join(reports, "metrics_remain.json"), remain.to_json())
    print(remain.format_table(), end="")
    if forgotten is not None:
        comparison = compare_forget_remain(forgotten, remain)
        write_json(os.path.join(reports, "metrics_forget.json"), forgotten.to_json())
        write_json(os.path.join(reports, "comparison.json"), comparison.to_json())
        with open(os.path.join(reports, "comparison.txt"), "w", encoding="utf-8") as out:
            out.write(comparison.format_table())
        print(comparison.format_table(), end="")
        csv_rows += forgotten.csv_rows(method, cfg.dataset_name, cfg.backbone.value)
        csv_rows += comparison.csv_rows(method, cfg.dataset_name, cfg.backbone.value)
    if args.strategies:
        strategies = [Strategy(name) for name in args.strategies]
        seeds = [derive_seed(cfg.seed, "strategy", i) for i in range(cfg.strategy_seeds)]
        comparison_of_strategies = compare_strategies(
            model, store, bundle.test, metadata.categories, cfg.backend_config(), cfg.pipeline_settings(),
            strategies, seeds, cfg.eval_ks, forget=forget, aux=AuxContext.from_metadata(metadata),
            perf_matrix=workspace.load_perf_matrix(Strategy.DIVERSITY in strategies), parallelism=cfg.jobs)
        write_json(os.path.join(reports, "strategies.json"), comparison_of_strategies.to_json())
        print(comparison_of_strategies.format_table(), end="")
        csv_rows += comparison_of_strategies.csv_rows(cfg.dataset_name, cfg.backbone.value)
    if args.emit_csv:
        write_csv(os.path.join(reports, "metrics.csv"), CSV_HEADER, csv_rows)
    if result.failures:
        log.warning("%d users could not be served", len(result.failures))
    return EXIT_OK


def _bench_metrics(outcome: TimingOutcome, workspace: Workspace, store: Dataset, bundle: SplitBundle,
                   metadata: ItemMetadata) -> List[Sequence[Any]]:
    cfg = workspace.config
    users = sorted(set(holdout_targets(bundle.test)) | {user for user, _ in outcome.forget})
    mode = outcome.report.method
    if mode is TimingMode.RETRAIN:
        ranked: Mapping[int, Sequence[int]] = backbone_rankings(outcome.model, store, users, outcome.forget,
                                                                cfg.num_candidates)
    else:
        ranked = workspace.orchestrator(outcome.model, store, metadata).run(users, outcome.forget, "bench").ranked
    remain, forgotten = evaluate_run(ranked, bundle.test, outcome.forget, cfg.all_ks, cfg.digest())
    write_json(workspace.path(BENCH_DIR, f"metrics_{mode.value}_remain.json"), remain.to_json())
    print(remain.format_table(), end="")
    rows = remain.csv_rows(mode.value, cfg.dataset_name, cfg.backbone.value)
    if forgotten is not None:
        write_json(workspace.path(BENCH_DIR, f"metrics_{mode.value}_forget.json"), forgotten.to_json())
        print(forgotten.format_table(), end="")
        rows += forgotten.csv_rows(mode.value, cfg.dataset_name, cfg.backbone.value)
    return rows


def cmd_bench(args: argparse.Namespace, workspace: Workspace) -> int:
    cfg = workspace.config
    bundle = workspace.load_bundle()
    metadata = workspace.load_metadata()
    store = deployed_data(bundle)
    user = args.user
    if user is None:
        candidates = store.users
        user = candidates[int(np.random.default_rng(cfg.bench_seed).integers(len(candidates)))]
    request_path = workspace.path(BENCH_DIR, "request.json")
    os.makedirs(os.path.dirname(request_path), exist_ok=True)
    save_forget_requests([ForgetRequest(user, None)], request_path)
    log.info("Benchmarking unlearning of the full history of user %d", user)
    context = BenchContext(store, metadata.categories, cfg.backbone, cfg.backbone_config(), cfg.pipeline_settings(),
                           cfg.backend_config(), AuxContext.from_metadata(metadata),
                           workspace.load_perf_matrix(cfg.strategy is Strategy.DIVERSITY), workspace.load_profiles(),
                           cfg.jobs)
    modes = [TimingMode.RETRAIN, TimingMode.CRAGRU] if args.mode == "both" else [TimingMode(args.mode)]
    outcomes = [time_unlearning(request_path, mode, workspace.checkpoint_path, context) for mode in modes]
    for outcome in outcomes:
        if outcome.result is not None:
            _check_leakage(outcome.result)
    write_json(workspace.path(BENCH_DIR, "timing.json"), {"user": user, "reports": [o.report.to_json() for o in outcomes]})
    print(format_timing([o.report for o in outcomes]), end="")
    if args.with_metrics:
        rows: List[Sequence[Any]] = []
        for outcome in outcomes:
            rows += _bench_metrics(outcome, workspace, store, bundle, metadata)
        write_csv(workspace.path(BENCH_DIR, "metrics.csv"), CSV_HEADER, rows)
    return EXIT_OK


def _common_options() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON configuration file (flags override its values)")
    common.add_argument("--seed", type=int, help="root seed")
    common.add_argument("--out", dest="out_dir", help="output directory")
    common.add_argument("--jobs", type=int, help="users served concurrently")
    common.add_argument("--backend", choices=BACKEND_CHOICES, help="score generation backend")
    common.add_argument("--endpoint-url", help="base URL of an OpenAI-compatible server (remote backend)")
    common.add_argument("--backbone", choices=[k.value for k in BackboneKind], help="backbone architecture")
    verbosity = common.add_mutually_exclusive_group()
    verbosity.add_argument("-v", "--verbose", action="store_true", help="log debug messages")
    verbosity.add_argument("-q", "--quiet", action="store_true", help="log warnings and errors only")
    return common


def _pipeline_options() -> argparse.ArgumentParser:
    pipeline = argparse.ArgumentParser(add_help=False)
    pipeline.add_argument("--strategy", choices=STRATEGY_CHOICES, help="retention strategy")
    pipeline.add_argument("--budget", dest="retained_budget", type=int, help="interactions retained per user (K)")
    pipeline.add_argument("--candidates", dest="num_candidates", type=int, help="backbone candidates per user")
    pipeline.add_argument("--grid-step", type=int, help="retention grid step in percent (diversity strategy)")
    return pipeline


def build_parser() -> argparse.ArgumentParser:
    common = _common_options()
    pipeline = _pipeline_options()
    parser = argparse.ArgumentParser(prog="ragforget",
                                     description="Recommendation unlearning through retrieval-stage filtering")
    commands = parser.add_subparsers(dest="command", metavar="command")
    commands.required = True

    prepare = commands.add_parser("prepare", parents=[common], help="split a ratings file")
    prepare.add_argument("--ratings", dest="ratings_path", help="ratings file")
    prepare.add_argument("--ratings-format", choices=["tsv", "csv", "dat"])
    prepare.add_argument("--items", dest="items_path", help="item metadata file")
    prepare.add_argument("--items-format", choices=["movielens_item", "movielens_dat", "genre_tsv"])
    prepare.add_argument("--users", dest="users_path", help="user demographics file")
    prepare.add_argument("--users-format", choices=["movielens_user", "movielens_users_dat"])
    prepare.add_argument("--forget", dest="forget_fraction", type=float, help="fraction of interactions to forget")
    prepare.add_argument("--ratios", type=float, nargs=3, metavar=("TRAIN", "VAL", "TEST"))
    prepare.add_argument("--dataset-name", help="dataset label used in reports")
    prepare.set_defaults(handler=cmd_prepare)

    train = commands.add_parser("train", parents=[common], help="train the backbone")
    train.add_argument("--epochs", type=int)
    train.add_argument("--dim", dest="embedding_dim", type=int)
    train.add_argument("--lr", dest="learning_rate", type=float)
    train.add_argument("--l2", dest="l2_reg", type=float)
    train.add_argument("--negatives", dest="negatives_per_positive", type=int)
    train.add_argument("--layers", dest="num_layers", type=int)
    train.add_argument("--batch-size", type=int)
    train.set_defaults(handler=cmd_train)

    recommend = commands.add_parser("recommend", parents=[common, pipeline], help="recommend without forgetting")
    recommend.add_argument("--users", dest="users", type=int, nargs="*", help="users to serve (default: all)")
    recommend.set_defaults(handler=cmd_recommend)

    unlearn = commands.add_parser("unlearn", parents=[common, pipeline], help="serve forget requests")
    unlearn.add_argument("--requests", required=True, help="forget-request JSON file")
    unlearn.set_defaults(handler=cmd_unlearn)

    perf = commands.add_parser("perf-matrix", parents=[common, pipeline], help="build the performance matrix")
    perf.set_defaults(handler=cmd_perf_matrix)

    evaluate = commands.add_parser("eval", parents=[common, pipeline], help="evaluate remain and forget sets")
    evaluate.add_argument("--strategies", nargs="*", choices=STRATEGY_CHOICES, help="also compare these strategies")
    evaluate.add_argument("--strategy-seeds", type=int, help="seeds averaged per strategy")
    evaluate.add_argument("--emit-csv", action="store_true", help="write reports/metrics.csv")
    evaluate.set_defaults(handler=cmd_eval)

    bench = commands.add_parser("bench", parents=[common, pipeline], help="time unlearning against retraining")
    bench.add_argument("--mode", choices=["both", "retrain", "cragru"], default="both")
    bench.add_argument("--with-metrics", action="store_true", help="also evaluate the unlearned outputs")
    bench.add_argument("--user", type=int, help="user whose history is forgotten (default: seeded random)")
    bench.set_defaults(handler=cmd_bench)
    return parser


_OVERRIDES = ("seed", "out_dir", "jobs", "backend", "endpoint_url", "backbone", "strategy", "retained_budget",
              "num_candidates", "ratings_path", "ratings_format", "items_path", "items_format", "users_path",
              "users_format", "forget_fraction", "ratios", "dataset_name", "epochs", "embedding_dim", "learning_rate",
              "l2_reg", "negatives_per_positive", "num_layers", "batch_size", "grid_step", "strategy_seeds")


def load_config(args: argparse.Namespace) -> RunConfig:
    """
    :return: the config file's values (or defaults) with every given flag applied on top
    """
    return RunConfig.load(args.config).with_overrides(**{name: getattr(args, name, None) for name in _OVERRIDES})


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    handler: Callable[[argparse.Namespace, Workspace], int] = args.handler
    try:
        return handler(args, Workspace(load_config(args)))
    except LeakageDetectedError as e:
        log.error("%s", e)
        return EXIT_LEAKAGE
    except Exception as e:
        log.error("%s failed: %s", args.command, e)
        log.debug("details", exc_info=True)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
