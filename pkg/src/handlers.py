"""One handler per subcommand; each reads and writes artifacts in the output directory."""

import logging
from pathlib import Path

import numpy as np

from src.config import (
    CALIBRATION_FILE,
    COVERAGE_CSV_FILE,
    COVERAGE_FILE,
    DATA_FILE,
    DATA_META_FILE,
    LOSS_TRACE_FILE,
    MAX_GRID_DIM,
    MODEL_FILE,
    REGION_FILE,
    REGION_POINTS_FILE,
    SAMPLES_FILE,
)
from src.conformal import calibrate, coverage_from_scores, score_dataset
from src.data import (
    SeriesSchema,
    apply_stats,
    gen_bimodal,
    gen_particle,
    load_csv,
    split,
    standardize,
    write_csv,
)
from src.decorators import command_error
from src.errors import ArtifactMismatchError, InputError
from src.flow import FlowModel, flow_sample, train_mle
from src.numerics import SeededRng
from src.persistence import (
    check_pair,
    load_metadata,
    load_model,
    load_record,
    save_coverage,
    save_loss_trace,
    save_metadata,
    save_model,
    save_record,
    write_table,
)
from src.regions import (
    GridSpec,
    bonferroni_box,
    box_residual_scores,
    export_region,
    grid_region,
    mc_region,
)
from src.run_config import RunConfig

logger = logging.getLogger(__name__)

COVERAGE_COLUMNS = [
    "epsilon",
    "coverage",
    "hits",
    "total",
    "mean_score",
    "threshold",
    "mean_volume",
    "mean_box_volume",
]


def _build_dataset(config: RunConfig):
    data = config.data
    if data.source == "particle":
        return gen_particle(data.n, data.context_len, data.horizon, data.sigma, data.seed)
    if data.source == "bimodal":
        return gen_bimodal(data.n, data.context_len, data.horizon, data.seed, sigma=data.sigma)
    return load_csv(data.path, SeriesSchema(data.context_len, data.horizon, dim=data.dim))


def _load_dataset(out_dir: Path):
    meta = load_metadata(out_dir / DATA_META_FILE)
    schema = SeriesSchema(meta["context_len"], meta["horizon"], n=meta["n"], dim=meta["dim"])
    dataset = load_csv(out_dir / DATA_FILE, schema)
    dataset.provenance = meta.get("provenance", {})
    return dataset


def _split(config: RunConfig, dataset):
    return split(dataset, config.split.train, config.split.calibration, config.split.seed)


def _standardised_parts(config: RunConfig, model: FlowModel, out_dir: Path):
    """Calibration and test subsets standardised with the model's own statistics."""
    if model.stats is None:
        raise InputError("Model carries no standardisation statistics")
    dataset = _load_dataset(out_dir)
    indices = _split(config, dataset)
    scaled = apply_stats(dataset, model.stats)
    return scaled.subset(indices.calibration), scaled.subset(indices.test), dataset.provenance


def _load_checked_model(config: RunConfig, out_dir: Path):
    model = load_model(out_dir / MODEL_FILE)
    if model.config_hash != config.config_hash():
        raise ArtifactMismatchError(
            "Model was trained with a different data/model/train/split configuration; "
            "rerun train or use the matching config"
        )
    return model


def _load_pair(config: RunConfig, out_dir: Path):
    model = _load_checked_model(config, out_dir)
    record = load_record(out_dir / CALIBRATION_FILE)
    check_pair(model, record)
    return model, record


def _test_series(test_set, index):
    if index >= test_set.n:
        raise InputError(f"Series {index} is out of range: the test split has {test_set.n} series")
    return test_set.contexts[index]


@command_error
def cmd_simulate(config: RunConfig, out_dir: Path):
    """Generates or ingests the dataset and writes data.csv plus its metadata."""
    dataset = _build_dataset(config)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_csv(dataset, out_dir / DATA_FILE)
    meta = dataset.metadata()
    meta["run_config"] = config.to_dict()
    save_metadata(meta, out_dir / DATA_META_FILE)
    logger.info("Dataset ready: n=%d T=%d H=%d D=%d", dataset.n, dataset.context_len,
                dataset.horizon, dataset.dim)


@command_error
def cmd_train(config: RunConfig, out_dir: Path):
    """Fits the flow on the training split and writes model.json and loss_trace.csv."""
    dataset = _load_dataset(out_dir)
    indices = _split(config, dataset)
    scaled, stats = standardize(dataset, indices.train)
    train_set = scaled.subset(indices.train)

    rng = SeededRng(config.train.seed)
    model = FlowModel.from_config(rng, dataset.context_len, dataset.horizon, dataset.dim,
                                  config.model, stats=stats, config_hash=config.config_hash())
    logger.info("Training %d parameters on %d series for %d epochs", model.n_params,
                train_set.n, config.train.epochs)
    model, trace = train_mle(model, train_set, config.train, rng.spawn(1))
    save_model(model, out_dir / MODEL_FILE, run_config=config.to_dict())
    save_loss_trace(trace, out_dir / LOSS_TRACE_FILE)


@command_error
def cmd_calibrate(config: RunConfig, out_dir: Path):
    """Scores the calibration split and writes calibration.json."""
    model = _load_checked_model(config, out_dir)
    cal_set, _, _ = _standardised_parts(config, model, out_dir)
    record = calibrate(model, cal_set)
    save_record(record, out_dir / CALIBRATION_FILE, run_config=config.to_dict())


@command_error
def cmd_region(config: RunConfig, out_dir: Path):
    """Builds the prediction region of one test series at the first configured epsilon."""
    model, record = _load_pair(config, out_dir)
    cal_set, test_set, _ = _standardised_parts(config, model, out_dir)
    settings = config.region
    context = _test_series(test_set, settings.series)
    epsilon = config.epsilons[0]

    if settings.mode == "grid":
        grid = GridSpec.around(cal_set.futures, settings.margin, settings.cells)
        region = grid_region(model, context, record, epsilon, grid, diagonal=settings.diagonal)
    else:
        region = mc_region(model, context, record, epsilon, settings.n_samples,
                           SeededRng(settings.seed), radius_factor=settings.radius_factor)
    region.series = settings.series
    export_region(region, out_dir / REGION_FILE, out_dir / REGION_POINTS_FILE,
                  run_config=config.to_dict())


def _region_volume(config: RunConfig, model, context, record, epsilon, cal_set, rng):
    settings = config.region
    if settings.mode == "grid" and model.label_dim <= MAX_GRID_DIM:
        grid = GridSpec.around(cal_set.futures, settings.margin, settings.cells)
        return grid_region(model, context, record, epsilon, grid, settings.diagonal).volume
    return mc_region(model, context, record, epsilon, settings.n_samples, rng,
                     radius_factor=settings.radius_factor).volume


def _efficiency(config: RunConfig, model, record, cal_set, test_set):
    """Mean region volume, mean box volume and box coverage per epsilon over the first series."""
    settings = config.region
    rng = SeededRng(settings.seed)
    count = min(settings.volume_series, test_set.n)
    residuals = box_residual_scores(model, cal_set, rng.spawn(0), settings.box_samples)
    out = {}
    for epsilon in config.epsilons:
        volumes, box_volumes, box_hits = [], [], 0
        for i in range(count):
            context = test_set.contexts[i]
            volumes.append(_region_volume(config, model, context, record, epsilon, cal_set,
                                          rng.spawn(1000 + i)))
            box = bonferroni_box(model, context, residuals, epsilon, rng.spawn(2000 + i),
                                 settings.box_samples)
            box_volumes.append(box.volume)
            box_hits += box.contains(test_set.futures[i])
        out[epsilon] = (float(np.mean(volumes)), float(np.mean(box_volumes)), box_hits / count)
    return out


@command_error
def cmd_coverage(config: RunConfig, out_dir: Path):
    """Empirical coverage per epsilon on the test split, written as coverage.json and .csv."""
    model, record = _load_pair(config, out_dir)
    cal_set, test_set, provenance = _standardised_parts(config, model, out_dir)
    if test_set.n < 1:
        raise InputError("Test split is empty")
    scores = score_dataset(model, test_set)
    efficiency = {}
    if config.region.compute_volume:
        efficiency = _efficiency(config, model, record, cal_set, test_set)

    rows, table = [], []
    for epsilon in config.epsilons:
        result = coverage_from_scores(record, scores, epsilon)
        q = None if result.threshold.include_all else result.threshold.q
        mean_volume, mean_box_volume, box_coverage = efficiency.get(epsilon, (None, None, None))
        rows.append({
            "epsilon": epsilon,
            "coverage": result.coverage,
            "hits": result.hits,
            "total": result.total,
            "mean_score": result.mean_score,
            "threshold": q,
            "include_all": result.threshold.include_all,
            "mean_volume": mean_volume,
            "mean_box_volume": mean_box_volume,
            "box_coverage": box_coverage,
        })
        table.append(tuple(rows[-1][c] for c in COVERAGE_COLUMNS))

    report = {
        "model_hash": model.model_hash(),
        "provenance": provenance,
        "run_config": config.to_dict(),
        "rows": rows,
    }
    save_coverage(report, out_dir / COVERAGE_FILE)
    write_table(table, COVERAGE_COLUMNS, out_dir / COVERAGE_CSV_FILE)


@command_error
def cmd_sample(config: RunConfig, out_dir: Path):
    """Draws raw-unit forecast trajectories for one test series into samples.csv."""
    model = _load_checked_model(config, out_dir)
    _, test_set, _ = _standardised_parts(config, model, out_dir)
    settings = config.region
    context = _test_series(test_set, settings.series)
    n = settings.forecast_samples
    draws = flow_sample(model, context, SeededRng(settings.seed), n, raw=True)
    draws = draws.reshape(n, model.horizon, model.dim)

    rows = []
    for k in range(n):
        for step in range(model.horizon):
            rows.append((k, step, *draws[k, step].tolist()))
    columns = ["sample", "step"] + [f"v{d}" for d in range(model.dim)]
    write_table(rows, columns, out_dir / SAMPLES_FILE)
    logger.info("Drew %d forecasts for test series %d", n, settings.series)
