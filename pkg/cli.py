"""Command-line harness: gen | train | cluster | eval | ablate.

Every command reads the bundled config.json, lays an optional --config file
and the flags over it, and writes deterministic JSON/CSV outputs.
"""
import argparse
import os
import sys

import cluster as clustering
import config
import embedder
import evalmod
from config import ConfigError
from hypmath import GeometryError
from info_logger import PipelineLogger
from record_file import DatasetError, JsonlFile, read_json, write_csv, write_json
from scene import (SceneError, generate_scene, generate_world, scene_from_record, scene_to_record,
                   world_from_record, world_to_record)

DETECTION_SOURCES = ('model', 'gt', 'none')
PURITY_COLUMNS = ('k', 'elbow', 'inertia', 'explained', 'mapped', 'purity', 'purity_mapped',
                  'purity_r', 'purity_c', 'purity_f', 'purity_s', 'purity_m', 'purity_l')

DOMAIN_ERRORS = (GeometryError, SceneError, embedder.TrainingError, clustering.ClusterError,
                 evalmod.EvaluationError, ConfigError, DatasetError, OSError)

logger = PipelineLogger(__name__)


def companion(path, suffix):
    # sibling file sharing the stem of path
    return os.path.splitext(path)[0] + suffix


def read_dataset(path):
    scenes = []
    for line_number, record in JsonlFile().read_records(path):
        try:
            scenes.append(scene_from_record(record))
        except ValueError as e:
            raise DatasetError(path, line_number, str(e))
    return scenes


def read_world(dataset_path):
    sidecar = companion(dataset_path, config.world_file_suffix)
    record = read_json(sidecar)
    try:
        tiers = {int(cat_id): tier for cat_id, tier in record['tiers'].items()}
    except (KeyError, AttributeError, ValueError) as e:
        raise DatasetError(sidecar, 1, 'malformed tier map: {0!r}'.format(e))
    return world_from_record(record), tiers


def cluster_count(run_cfg, world):
    # unset k: k_factor clusters per category, the surplus ends up novel
    settings = run_cfg['cluster']
    if settings.get('k') is not None:
        return int(settings['k'])
    return max(1, int(round(settings.get('k_factor', 1.0) * len(world))))


def size_bins(run_cfg):
    return run_cfg['evaluation']['small_area'], run_cfg['evaluation']['medium_area']


def cmd_gen(run_cfg, out_path):
    seed = int(run_cfg['seed'])
    scene_cfg = config.scene_config(run_cfg)
    world = generate_world(config.world_config(run_cfg), embedder.stage_seed(seed, embedder.STAGE_WORLD))
    jsonl = JsonlFile()
    jsonl.create_file(os.path.dirname(out_path), os.path.basename(out_path))
    try:
        for i in range(scene_cfg.n_scenes):
            scene = generate_scene(world, scene_cfg, embedder.stage_seed(seed, embedder.STAGE_SCENE, i), scene_id=i)
            jsonl.write_record(scene_to_record(scene))
    finally:
        count = jsonl.stop_writing()
    sidecar = dict(world_to_record(world), seed=seed)
    logger.log_stage('gen', scenes=count, categories=len(world))
    return [out_path, write_json(companion(out_path, config.world_file_suffix), sidecar)]


def cmd_train(dataset, run_cfg, out_params):
    scenes = read_dataset(dataset)
    params, trace = embedder.train(scenes, config.train_config(run_cfg))
    return [write_json(out_params, embedder.params_to_record(params)),
            write_csv(companion(out_params, config.loss_file_suffix), embedder.LOSS_COLUMNS, trace)]


def cmd_cluster(dataset, params_path, run_cfg, out_model):
    scenes = read_dataset(dataset)
    world, tiers = read_world(dataset)
    params = embedder.params_from_record(read_json(params_path))
    train_cfg = config.train_config(run_cfg)
    settings = run_cfg['cluster']
    discovery = evalmod.prepare_discovery(params, scenes, train_cfg.proposals_per_scene, train_cfg.nms_threshold,
                                          settings['match_iou'], settings['anchors_per_label'])
    seed = embedder.stage_seed(run_cfg['seed'], embedder.STAGE_CLUSTER)
    written = []
    if settings.get('k_grid'):
        models = clustering.kmeans_sweep(discovery.points, settings['k_grid'], seed, settings['max_iter'],
                                         params.geometry, settings['n_init'])
        k_star, curve = clustering.elbow_select_k(discovery.points, settings['k_grid'], seed, settings['max_iter'],
                                                  params.geometry, models, settings['n_init'])
        rows = clustering.purity_sweep(discovery.points, discovery.gt_labels, discovery.anchors, tiers, models,
                                       k_star, params.geometry, evalmod.proposal_areas(discovery),
                                       size_bins(run_cfg))
        for row, point in zip(rows, curve):
            row.update(inertia=point['inertia'], explained=point['explained'])
        written.append(write_csv(companion(out_model, config.purity_file_suffix), PURITY_COLUMNS, rows))
        model = models[k_star]
    else:
        model = clustering.hyperbolic_kmeans(discovery.points, cluster_count(run_cfg, world), seed,
                                             settings['max_iter'], params.geometry, settings['n_init'])
    label_assignment = clustering.assign_labels(model, discovery.points, discovery.anchors, params.geometry)
    written.insert(0, write_json(out_model, clustering.model_to_record(model)))
    written.insert(1, write_json(companion(out_model, config.labels_file_suffix),
                                 clustering.labels_to_record(label_assignment)))
    return written


def evaluate(dataset, model_path, run_cfg, detections='model'):
    """EvalReport of a clustered dataset; detections 'gt' and 'none' bracket the scale."""
    if detections not in DETECTION_SOURCES:
        raise evalmod.EvaluationError('unknown detection source {0!r}'.format(detections))
    scenes = read_dataset(dataset)
    _, tiers = read_world(dataset)
    train_cfg = config.train_config(run_cfg)
    discovery = evalmod.kept_proposals(scenes, train_cfg.proposals_per_scene, train_cfg.nms_threshold,
                                       run_cfg['cluster']['match_iou'])
    gts = evalmod.ground_truths(scenes)
    if detections == 'gt':
        labels = sorted({gt.label for gt in gts})
        identity = clustering.LabelAssignment({label: label for label in labels}, [])
        report = evalmod.map_summary(evalmod.gt_detections(scenes), gts, tiers, size_bins(run_cfg))
        return evalmod.fill_purity(report, discovery.gt_labels, discovery.gt_labels, tiers, identity,
                                  evalmod.proposal_areas(discovery), size_bins(run_cfg))
    model = clustering.model_from_record(read_json(model_path))
    label_assignment = clustering.labels_from_record(read_json(companion(model_path, config.labels_file_suffix)))
    if detections == 'none':
        report = evalmod.map_summary([], gts, tiers, size_bins(run_cfg), novel=len(label_assignment.novel))
        if len(model.assignment) != len(discovery.owners):
            raise evalmod.EvaluationError('cluster model does not cover the dataset proposals')
        return evalmod.fill_purity(report, model.assignment, discovery.gt_labels, tiers, label_assignment,
                                  evalmod.proposal_areas(discovery), size_bins(run_cfg))
    return evalmod.evaluate_discovery(discovery, scenes, model, label_assignment, tiers, size_bins(run_cfg))


def cmd_eval(dataset, model_path, run_cfg, out_report, detections='model'):
    row = evaluate(dataset, model_path, run_cfg, detections).to_row()
    return [write_json(companion(out_report, '.json'), row),
            write_csv(companion(out_report, '.csv'), evalmod.REPORT_COLUMNS, [row])]


def cmd_ablate(dataset, suite_path, run_cfg, out_table):
    suite = read_json(suite_path) if suite_path else run_cfg['ablation_suite']
    if not isinstance(suite, dict):
        raise evalmod.EvaluationError('an ablation suite is a JSON object of named deltas')
    scenes = read_dataset(dataset)
    world, tiers = read_world(dataset)
    settings = run_cfg['cluster']
    rows = evalmod.run_ablation(scenes, tiers, config.train_config(run_cfg), suite, cluster_count(run_cfg, world),
                                settings['max_iter'], settings['match_iou'], settings['anchors_per_label'],
                                size_bins(run_cfg), settings['n_init'])
    return [write_csv(out_table, evalmod.ABLATION_COLUMNS, rows)]


def parse_k_grid(text):
    """'start:stop[:step]' (stop inclusive) or a comma separated list."""
    try:
        if ':' in text:
            parts = [int(p) for p in text.split(':')]
            if len(parts) not in (2, 3) or (len(parts) == 3 and parts[2] < 1):
                raise ValueError(text)
            grid = list(range(parts[0], parts[1] + 1, parts[2] if len(parts) == 3 else 1))
        else:
            grid = [int(p) for p in text.split(',') if p.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError('invalid k grid {0!r}'.format(text))
    if len(grid) < 3 or any(a >= b for a, b in zip(grid, grid[1:])) or grid[0] < 1:
        raise argparse.ArgumentTypeError('k grid {0!r} needs 3 or more ascending positive values'.format(text))
    return grid


def apply_overrides(run_cfg, args):
    # flags win over every config file
    if args.seed is not None:
        run_cfg['seed'] = args.seed
    train = {'geometry': args.geometry, 'epochs': args.epochs, 'alpha': args.alpha, 'beta': args.beta,
             'gamma': args.gamma, 'proposals_per_scene': args.proposals_per_scene, 'learning_rate': args.lr}
    run_cfg['train'].update({key: value for key, value in train.items() if value is not None})
    if args.k is not None:
        run_cfg['cluster']['k'] = args.k
    if args.k_grid is not None:
        run_cfg['cluster']['k_grid'] = args.k_grid
    return run_cfg


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', help='JSON file laid over the bundled config.json')
    common.add_argument('--seed', type=int, help='root seed of every random stage')
    common.add_argument('--out', required=True, help='output file')
    common.add_argument('--log-file', help='write the log here instead of stderr')
    common.add_argument('--geometry', choices=embedder.GEOMETRIES)
    common.add_argument('--epochs', type=int)
    common.add_argument('--alpha', type=float)
    common.add_argument('--beta', type=float)
    common.add_argument('--gamma', type=float)
    common.add_argument('--lr', type=float)
    common.add_argument('--proposals-per-scene', type=int)
    common.add_argument('--k', type=int, help='number of clusters')
    common.add_argument('--k-grid', type=parse_k_grid, help="elbow grid, 'start:stop[:step]' or '6,8,10'")

    parser = argparse.ArgumentParser(prog='discovery', description='Hyperbolic category discovery pipeline')
    commands = parser.add_subparsers(dest='command', metavar='command')
    commands.required = True
    commands.add_parser('gen', parents=[common], help='generate a synthetic scene dataset')
    train = commands.add_parser('train', parents=[common], help='train the encoder')
    train.add_argument('--dataset', required=True)
    cluster = commands.add_parser('cluster', parents=[common], help='cluster embedded proposals')
    cluster.add_argument('--dataset', required=True)
    cluster.add_argument('--params', required=True)
    evaluation = commands.add_parser('eval', parents=[common], help='evaluate a cluster model')
    evaluation.add_argument('--dataset', required=True)
    evaluation.add_argument('--model')
    evaluation.add_argument('--detections', choices=DETECTION_SOURCES, default='model')
    ablate = commands.add_parser('ablate', parents=[common], help='run the ablation suite')
    ablate.add_argument('--dataset', required=True)
    ablate.add_argument('--suite', help='JSON suite of named deltas; default: the configured suite')
    return parser


def run_command(args, run_cfg):
    if args.command == 'gen':
        return cmd_gen(run_cfg, args.out)
    if args.command == 'train':
        return cmd_train(args.dataset, run_cfg, args.out)
    if args.command == 'cluster':
        return cmd_cluster(args.dataset, args.params, run_cfg, args.out)
    if args.command == 'eval':
        if args.model is None and args.detections != 'gt':
            raise evalmod.EvaluationError('--model is required unless --detections gt')
        return cmd_eval(args.dataset, args.model, run_cfg, args.out, args.detections)
    return cmd_ablate(args.dataset, args.suite, run_cfg, args.out)


def main(argv=None):
    args = build_parser().parse_args(argv)
    PipelineLogger.configure(args.log_file)
    try:
        run_cfg = apply_overrides(config.load_config(args.config), args)
        written = run_command(args, run_cfg)
    except DOMAIN_ERRORS as e:
        logger.error('Command', args.command, 'failed:', e)
        return 1
    for path in written:
        logger.log_written(path)
    return 0


if __name__ == '__main__':
    sys.exit(main())
