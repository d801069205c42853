"""
Experiment workflows behind the management commands: training runs, checkpoint
evaluation, parameter sweeps and sample dumps, with their run-directory
artifacts.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, replace
from pathlib import Path

from django.conf import settings
from rest_framework.exceptions import ParseError
from rest_framework.parsers import JSONParser

from utils.artifact_store import atomic_write, read_checkpoint, write_checkpoint
from utils.dataset_upload import MissingColumn

from .autodiff import default_dtype, make_generator
from .federation import ArchitectureMismatch, FederationConfig, prepare_dataset, run_training
from .gan import EmptyDataset, GeneratorModel, GradientPenaltyConfig, parse_discriminator_dims, sample_graphs
from .metrics import MetricsConfig, evaluate
from .models import GenerationMode, SweepAxis
from .molgraph import NUM_ATOM_TYPES, NUM_BOND_TYPES, is_valid
from .serializers import (
    ExperimentConfigSerializer, MetricsReportSerializer, RoundRecordSerializer, RunReportSerializer, render_json,
)
from .smiles import format_skip_log, load_dataset, write

logger = logging.getLogger(__name__)

# Offset between the training seed and the seed of the evaluation sampler
EVAL_SEED_OFFSET = 7919

TABLE_COLUMNS = [
    'Datasets', 'Generator Dimension', 'Discriminator Dimension', 'Number of Clients', 'QED', 'Diversity',
    'Validity', 'Uniqueness', 'Novelty', 'LogP', 'Similarity',
]
MIN_COLUMN_WIDTH = 7

SWEEP_TSV_COLUMNS = [
    'axis_value', 'validity', 'uniqueness', 'novelty', 'int_div_1', 'int_div_2', 'snn', 'logp_normalized',
    'all_pad_fraction',
]


class ConfigError(ValueError):
    pass


class MultipleSweepAxes(ConfigError):
    pass


class DatasetError(RuntimeError):
    pass


def exit_code_for(error):
    """Exit status of a failed command: 2 for configuration, 3 for dataset, 1 for anything else."""
    if isinstance(error, ConfigError):
        return 2
    if isinstance(error, DatasetError):
        return 3
    return 1


@dataclass(frozen=True)
class ExperimentConfig:
    version: int
    preset: str
    dataset: str
    column: str
    n_max: int
    require_connected: bool
    split_ratios: list
    generator_dims: list
    discriminator_dims: str
    dropout_gen: float
    dropout_disc: float
    num_clients: int
    partition: str
    alpha: float
    aggregation: str
    epochs_per_round: int
    batch_size: int
    rounds: int
    gamma: float
    epsilon_mode: str
    epsilon: float
    loss_form: str
    lr: float
    beta1: float
    beta2: float
    lr_decay_interval: int
    lr_decay_factor: float
    temperature: float
    noise_resample_interval: int
    seed: int
    deterministic: bool
    workers: int
    eval_interval: int
    eval_samples: int
    sample_mode: str
    snn_sample_size: int
    fingerprint_bits: int
    fingerprint_radius: int
    logp_bounds: list
    checkpoint_interval: int
    plateau_window: int
    plateau_threshold: float
    stop_on_plateau: bool
    output_dir: str
    sweep: dict

    @property
    def dataset_name(self):
        return self.preset or Path(self.dataset).stem

    def to_dict(self):
        return asdict(self)

    def federation_config(self):
        conv_dims, reduce_dim, head_dims = parse_discriminator_dims(self.discriminator_dims)
        return FederationConfig(
            num_clients=self.num_clients,
            epochs_per_round=self.epochs_per_round,
            batch_size=self.batch_size,
            rounds=self.rounds,
            partition=self.partition,
            alpha=self.alpha,
            seed=self.seed,
            aggregation=self.aggregation,
            split_ratios=tuple(self.split_ratios),
            deterministic=self.deterministic,
            workers=self.workers,
            n_max=self.n_max,
            generator_dims=tuple(self.generator_dims),
            conv_dims=tuple(conv_dims),
            reduce_dim=reduce_dim,
            head_dims=tuple(head_dims),
            dropout_gen=self.dropout_gen,
            dropout_disc=self.dropout_disc,
            lr=self.lr,
            beta1=self.beta1,
            beta2=self.beta2,
            lr_decay_interval=self.lr_decay_interval,
            lr_decay_factor=self.lr_decay_factor,
            penalty=GradientPenaltyConfig(self.gamma, self.epsilon_mode, self.epsilon),
            loss_form=self.loss_form,
            temperature=self.temperature,
            noise_resample_interval=self.noise_resample_interval,
            eval_interval=self.eval_interval,
            plateau_window=self.plateau_window,
            plateau_threshold=self.plateau_threshold,
            stop_on_plateau=self.stop_on_plateau,
        )

    def metrics_config(self):
        return MetricsConfig(
            fingerprint_bits=self.fingerprint_bits,
            fingerprint_radius=self.fingerprint_radius,
            snn_sample_size=self.snn_sample_size,
            seed=self.seed,
            logp_bounds=tuple(self.logp_bounds),
            require_connected=self.require_connected,
        )


def _flatten_errors(errors, prefix=''):
    if isinstance(errors, dict):
        parts = [_flatten_errors(value, f"{prefix}{key}.") for key, value in errors.items()]
        return '; '.join(part for part in parts if part)
    if isinstance(errors, list):
        if all(not isinstance(item, (dict, list)) for item in errors):
            return f"{prefix.rstrip('.')}: {' '.join(str(item) for item in errors)}"
        return '; '.join(_flatten_errors(item, prefix) for item in errors)
    return f"{prefix.rstrip('.')}: {errors}"


def validate_config(raw, base_dir=None):
    serializer = ExperimentConfigSerializer(data=raw)
    if not serializer.is_valid():
        raise ConfigError(f"invalid configuration: {_flatten_errors(serializer.errors)}")
    data = dict(serializer.validated_data)

    dataset = Path(data['dataset']).expanduser()
    if not dataset.is_absolute() and base_dir is not None:
        dataset = Path(base_dir) / dataset
    data['dataset'] = str(dataset.resolve())
    return ExperimentConfig(**data)


def load_config(path, overrides=None):
    """
    Read and validate a JSON experiment configuration; relative dataset paths
    are resolved against the configuration file's directory.
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"configuration file not found: {path}")
    try:
        with path.open('rb') as stream:
            raw = JSONParser().parse(stream)
    except ParseError as e:
        raise ConfigError(f"configuration file {path} is not valid JSON: {e.detail}") from e
    if not isinstance(raw, dict):
        raise ConfigError(f"configuration file {path} must hold a JSON object")
    raw.update({key: value for key, value in (overrides or {}).items() if value is not None})
    return validate_config(raw, base_dir=path.parent)


def run_directory(cfg):
    if cfg.output_dir:
        return Path(cfg.output_dir)
    return Path(settings.MOLFED_OUTPUT_ROOT) / f"{cfg.dataset_name}-seed{cfg.seed}"


def read_dataset(cfg):
    try:
        loaded = load_dataset(cfg.dataset, cfg.column, cfg.n_max, cfg.require_connected)
    except (FileNotFoundError, MissingColumn, UnicodeDecodeError) as e:
        raise DatasetError(str(e)) from e
    except ValueError as e:
        raise DatasetError(f"could not read dataset {cfg.dataset}: {e}") from e
    if not loaded.graphs:
        raise DatasetError(f"dataset {cfg.dataset} contains no usable molecules")
    return loaded


def prepare_reference(cfg, loaded, fed_cfg=None):
    try:
        return prepare_dataset(loaded.graphs, fed_cfg or cfg.federation_config())
    except EmptyDataset as e:
        raise DatasetError(str(e)) from e


def format_dims(dims):
    return '[' + ','.join(str(d) for d in dims) + ']'


def _table_widths():
    return [max(len(column), MIN_COLUMN_WIDTH) for column in TABLE_COLUMNS]


def table_header():
    widths = _table_widths()
    header = ' | '.join(column.ljust(width) for column, width in zip(TABLE_COLUMNS, widths)).rstrip()
    rule = '-+-'.join('-' * width for width in widths)
    return f"{header}\n{rule}\n"


def table_row(cfg, report):
    cells = [
        cfg.dataset_name,
        format_dims(cfg.generator_dims),
        cfg.discriminator_dims,
        str(cfg.num_clients),
        'N/A' if report.qed is None else f"{report.qed:.3f}",
        f"{report.int_div_1:.3f}",
        f"{report.validity:.2f}",
        f"{report.uniqueness:.2f}",
        f"{report.novelty:.2f}",
        f"{report.logp_normalized:.3f}",
        f"{report.snn:.3f}",
    ]
    return ' | '.join(cell.ljust(width) for cell, width in zip(cells, _table_widths())).rstrip() + '\n'


def render_table(rows):
    """Fixed-width metrics table; ``rows`` are (ExperimentConfig, MetricsReport) pairs."""
    return table_header() + ''.join(table_row(cfg, report) for cfg, report in rows)


def report_payload(cfg, round_number, report, skipped=0):
    return RunReportSerializer({
        'dataset': cfg.dataset_name,
        'generator_dims': cfg.generator_dims,
        'discriminator_dims': cfg.discriminator_dims,
        'num_clients': cfg.num_clients,
        'dropout_gen': cfg.dropout_gen,
        'dropout_disc': cfg.dropout_disc,
        'seed': cfg.seed,
        'round': round_number,
        'skipped_records': skipped,
        'metrics': report,
    }).data


def render_report_text(cfg, round_number, report):
    lines = [render_table([(cfg, report)])]
    metrics = MetricsReportSerializer(report).data
    lines.append(f"round: {round_number}\n")
    for key, value in metrics.items():
        if key == 'warnings':
            continue
        lines.append(f"{key}: {'null' if value is None else value}\n")
    for warning in report.warnings:
        lines.append(f"warning: {warning}\n")
    return ''.join(lines)


def model_tensors(generator, discriminator):
    tensors = {f"generator.{name}": value for name, value in generator.state_dict().items()}
    tensors.update({f"discriminator.{name}": value for name, value in discriminator.state_dict().items()})
    return tensors


def generator_from_checkpoint(tensors):
    """Rebuild the generator from checkpoint parameter names and shapes."""
    params = {name[len('generator.'):]: value for name, value in tensors.items() if name.startswith('generator.')}
    layer_dims = []
    while f"hidden.{len(layer_dims)}.weight" in params:
        layer_dims.append(params[f"hidden.{len(layer_dims)}.weight"].shape[0])
    if not layer_dims or 'node_head.weight' not in params or 'edge_head.weight' not in params:
        raise ArchitectureMismatch("checkpoint holds no complete generator")

    noise_dim = params['hidden.0.weight'].shape[1]
    node_rows = params['node_head.weight'].shape[0]
    n_max = node_rows // NUM_ATOM_TYPES
    if node_rows % NUM_ATOM_TYPES or params['edge_head.weight'].shape[0] != n_max * n_max * NUM_BOND_TYPES:
        raise ArchitectureMismatch("generator heads do not match the atom and bond alphabets")

    generator = GeneratorModel(layer_dims, noise_dim, n_max).to(default_dtype())
    try:
        generator.load_state_dict(params)
    except RuntimeError as e:
        raise ArchitectureMismatch(f"checkpoint does not fit the inferred generator: {e}") from e
    generator.eval()
    return generator


def _series_tsv(history, attribute):
    return 'round\tloss\n' + ''.join(f"{record.round}\t{getattr(record, attribute)!r}\n" for record in history)


def train_run(cfg):
    """Run one training experiment and write its artifacts; returns (run_dir, final report or None)."""
    run_dir = run_directory(cfg)
    loaded = read_dataset(cfg)
    fed_cfg = cfg.federation_config()
    dataset = prepare_reference(cfg, loaded, fed_cfg)
    reference = dataset.train_graphs

    atomic_write(run_dir / 'config.json', render_json(cfg.to_dict(), indent=2))
    atomic_write(run_dir / 'skipped.tsv', format_skip_log(loaded.skipped))
    logger.info(f"Training run in {run_dir}: {len(loaded.graphs)} molecules, {len(loaded.skipped)} skipped")

    round_lines = []

    def evaluate_state(state):
        rng = make_generator(cfg.seed + EVAL_SEED_OFFSET)
        graphs = sample_graphs(state.generator, cfg.eval_samples, rng, cfg.sample_mode, cfg.temperature)
        report = evaluate(graphs, reference, cfg.metrics_config())
        payload = report_payload(cfg, state.round, report, len(loaded.skipped))
        atomic_write(run_dir / 'reports' / f"round_{state.round:04d}.json", render_json(payload, indent=2))
        return report

    def record_round(state, record):
        round_lines.append(render_json(RoundRecordSerializer(record).data) + b'\n')
        atomic_write(run_dir / 'round_log.jsonl', b''.join(round_lines))
        if cfg.checkpoint_interval and state.round % cfg.checkpoint_interval == 0:
            write_checkpoint(
                run_dir / 'checkpoints' / f"round_{state.round:04d}.ckpt",
                model_tensors(state.generator, state.discriminator),
            )

    state, reports = run_training(fed_cfg, dataset, evaluate=evaluate_state, on_round=record_round)

    atomic_write(run_dir / 'round_log.jsonl', b''.join(round_lines))
    atomic_write(run_dir / 'generator_loss.tsv', _series_tsv(state.history, 'global_gen_loss'))
    atomic_write(run_dir / 'discriminator_loss.tsv', _series_tsv(state.history, 'global_disc_loss'))
    write_checkpoint(run_dir / 'checkpoints' / 'final.ckpt', model_tensors(state.generator, state.discriminator))

    final = reports[-1][1] if reports else None
    atomic_write(
        run_dir / 'report.json', render_json(report_payload(cfg, state.round, final, len(loaded.skipped)), indent=2),
    )
    if final is None:
        atomic_write(run_dir / 'report.txt', f"no evaluation after {state.round} rounds\n")
    else:
        atomic_write(run_dir / 'report.txt', render_report_text(cfg, state.round, final))
    logger.info(f"Run finished after {state.round} rounds; artifacts in {run_dir}")
    return run_dir, final


def cmd_train(config_path, seed=None, deterministic=None, out=None):
    cfg = load_config(config_path, {'seed': seed, 'deterministic': deterministic or None, 'output_dir': out})
    run_dir, _ = train_run(cfg)
    return run_dir


def cmd_eval(checkpoint, config_path, n_samples=256, seed=0, out=None):
    """
    Sample a checkpoint's generator in hard mode and score it against the
    training split. The split follows the configuration's own seed; ``seed``
    only drives the sampler.
    """
    cfg = load_config(config_path)
    generator = generator_from_checkpoint(read_checkpoint(checkpoint))
    loaded = read_dataset(cfg)
    reference = prepare_reference(cfg, loaded).train_graphs

    graphs = sample_graphs(generator, n_samples, make_generator(seed), GenerationMode.HARD, cfg.temperature)
    report = evaluate(graphs, reference, cfg.metrics_config())
    text = render_report_text(cfg, 0, report)
    if out:
        out = Path(out)
        atomic_write(out / 'eval_report.json', render_json(MetricsReportSerializer(report).data, indent=2))
        atomic_write(out / 'eval_report.txt', text)
    return report, text


def cmd_dump_samples(checkpoint, n_samples=10, seed=0, out=None):
    """Write generated molecules as SMILES, one per line; invalid ones carry a '# invalid' suffix."""
    generator = generator_from_checkpoint(read_checkpoint(checkpoint))
    graphs = sample_graphs(generator, n_samples, make_generator(seed), GenerationMode.HARD)
    lines = []
    for graph in graphs:
        if is_valid(graph):
            lines.append(f"{write(graph)}\n")
        else:
            lines.append(f"{write(graph, strict=False)} # invalid\n")
    path = Path(out) if out else Path(checkpoint).with_name(f"samples_seed{seed}.smi")
    atomic_write(path, ''.join(lines))
    logger.info(f"Wrote {len(lines)} samples to {path}")
    return path


def sweep_axis(cfg):
    sweep = cfg.sweep or {}
    axes = [(axis, values) for axis, values in sweep.items() if len(values) >= 2]
    if len(axes) != 1 or len(sweep) != 1:
        raise MultipleSweepAxes(
            f"a sweep needs exactly one axis with at least two values, got {sorted(sweep) or 'none'}"
        )
    return axes[0]


def sweep_point(cfg, axis, value, root):
    label = str(value).replace(' ', '')
    changes = {'sweep': None, 'output_dir': str(root / f"{axis}-{label}")}
    if axis == SweepAxis.DROPOUT:
        changes.update(dropout_gen=float(value), dropout_disc=float(value))
    elif axis == SweepAxis.NUM_CLIENTS:
        changes['num_clients'] = int(value)
    else:
        changes['discriminator_dims'] = label
    return replace(cfg, **changes)


def cmd_sweep(config_path, seed=None, deterministic=None, out=None):
    """Train once per value of the single sweep axis and tabulate the final reports."""
    cfg = load_config(config_path, {'seed': seed, 'deterministic': deterministic or None, 'output_dir': out})
    axis, values = sweep_axis(cfg)
    root = run_directory(cfg)
    points = [sweep_point(cfg, axis, value, root) for value in values]
    logger.info(f"Sweeping {axis} over {values} in {root}")

    if cfg.deterministic or cfg.workers <= 1:
        results = [train_run(point) for point in points]
    else:
        with ThreadPoolExecutor(max_workers=cfg.workers) as executor:
            results = list(executor.map(train_run, points))

    rows = [(point, report) for point, (_, report) in zip(points, results) if report is not None]
    table_path = atomic_write(root / 'sweep' / 'table.txt', render_table(rows))

    tsv = ['\t'.join(SWEEP_TSV_COLUMNS) + '\n']
    for value, (_, report) in zip(values, results):
        if report is None:
            continue
        metrics = [getattr(report, column) for column in SWEEP_TSV_COLUMNS[1:]]
        tsv.append('\t'.join([str(value).replace(' ', '')] + [repr(float(m)) for m in metrics]) + '\n')
    atomic_write(root / 'sweep' / 'sweep.tsv', ''.join(tsv))
    return table_path
