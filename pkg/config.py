import copy
import json
import os

config_path = os.path.join(os.path.dirname(os.path.abspath(__file__)), 'config.json')

with open(config_path, 'r', encoding='utf-8') as f:
    cfg = json.loads(f.read())

seed = cfg.get('seed', 0)
world = cfg.get('world', {})
scene = cfg.get('scene', {})
train = cfg.get('train', {})
cluster = cfg.get('cluster', {})
evaluation = cfg.get('evaluation', {})
ablation_suite = cfg.get('ablation_suite', {})

sections = ('seed', 'world', 'scene', 'train', 'cluster', 'evaluation', 'ablation_suite')

iou_thresholds = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))  # .50:.05:.95
world_file_suffix = '.world.json'
loss_file_suffix = '.loss.csv'
labels_file_suffix = '.labels.json'
purity_file_suffix = '.purity.csv'


class ConfigError(ValueError):
    """Raised for malformed or unknown configuration entries"""
    pass


def load_config(path=None):
    # bundled defaults, with the sections of the file at path laid over them
    merged = copy.deepcopy(cfg)
    if path is None:
        return merged
    with open(path, 'r', encoding='utf-8') as fp:
        try:
            user_cfg = json.loads(fp.read())
        except json.JSONDecodeError as e:
            raise ConfigError('config {0} is not valid JSON: {1}'.format(path, e))
    if not isinstance(user_cfg, dict):
        raise ConfigError('config {0} must hold a JSON object'.format(path))
    for key, value in user_cfg.items():
        if key not in sections:
            raise ConfigError('unknown config section: {0}'.format(key))
        if key == 'ablation_suite' or not isinstance(value, dict):
            # the suite is replaced as a whole, never merged row by row
            merged[key] = value
        else:
            merged[key].update(value)
    return merged


def _build(cls, section, name):
    fields = getattr(cls, '__dataclass_fields__', {})
    unknown = sorted(set(section) - set(fields))
    if unknown:
        raise ConfigError('unknown {0} keys: {1}'.format(name, ', '.join(unknown)))
    values = {}
    for key, value in section.items():
        values[key] = tuple(value) if isinstance(value, list) else value
    try:
        return cls(**values)
    except (TypeError, ValueError) as e:
        raise ConfigError('invalid {0} config: {1}'.format(name, e))


def world_config(run_cfg):
    from scene import WorldConfig
    return _build(WorldConfig, run_cfg.get('world', {}), 'world')


def scene_config(run_cfg):
    from scene import SceneConfig
    return _build(SceneConfig, run_cfg.get('scene', {}), 'scene')


def train_config(run_cfg):
    from embedder import TrainConfig
    section = dict(run_cfg.get('train', {}))
    section.setdefault('seed', run_cfg.get('seed', seed))
    return _build(TrainConfig, section, 'train')
