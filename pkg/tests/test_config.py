import os

import pytest

from src.cli import main
from src.config import ConfigLoader, apply_thread_limit, get_config, load_json_model
from src.config.loader import THREAD_ENV_VARS
from src.models import BackboneSpec, TrainConfig
from src.utils.logger import get_logger, parse_size, set_run_context, setup_logging


def test_dotted_keys_and_defaults(app_config):
    """测试点分隔键读取与默认值"""
    loader = ConfigLoader(app_config)
    assert loader.get('defaults.probe.min_samples') == 64
    assert loader.get('defaults.probe.missing', 7) == 7
    assert loader.get('logging.level.deeper') is None
    assert loader.get_train_defaults() == {'epochs': 1, 'batch_size': 4, 'base_lr': 0.01}
    assert loader.validate()


def test_env_overrides(app_config, monkeypatch):
    """测试环境变量覆盖"""
    monkeypatch.setenv('RCM_LOG_LEVEL', 'DEBUG')
    monkeypatch.setenv('RCM_THREADS', '4')
    loader = ConfigLoader(app_config)
    assert loader.get('logging.level') == 'DEBUG'
    assert loader.get('runtime.threads') == 4


def test_get_config_prefers_argument(app_config, monkeypatch, tmp_path):
    monkeypatch.setenv('RCM_CONFIG', str(tmp_path / 'nowhere.yaml'))
    assert get_config(str(app_config)).get('runtime.dtype') == 'float64'


@pytest.mark.parametrize("body", [
    "logging:\n  level: INFO\n",
    "logging:\n  level: INFO\ndefaults:\n  probe: {min_samples: 0, oversampling: 4}\n"
    "  rsa: {m: 4}\n  verify: {tol: 0.001}\n",
    "logging:\n  level: INFO\ndefaults:\n  probe: {min_samples: 8, oversampling: 4}\n"
    "  rsa: {m: 4}\n  verify: {tol: -1}\n",
    "logging:\n  level: INFO\ndefaults:\n  probe: {min_samples: 8, oversampling: 4}\n"
    "  rsa: {m: 1}\n  verify: {tol: 0.1}\n",
    "logging:\n  level: INFO\nruntime:\n  dtype: float16\ndefaults:\n"
    "  probe: {min_samples: 8, oversampling: 4}\n  rsa: {m: 4}\n  verify: {tol: 0.1}\n",
])
def test_validate_failures(tmp_path, body):
    """测试缺项与非法取值"""
    path = tmp_path / 'bad.yaml'
    path.write_text(body, encoding='utf-8')
    assert not ConfigLoader(path).validate()


def test_load_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        ConfigLoader(tmp_path / 'missing.yaml').load()
    broken = tmp_path / 'broken.yaml'
    broken.write_text("logging: [unclosed\n", encoding='utf-8')
    with pytest.raises(ValueError):
        ConfigLoader(broken).load()


def test_json_model_loading(write_json):
    """测试 JSON 实验配置的校验"""
    path = write_json('arch.json', {'stages': [{'width': 8}, {'width': 16, 'stride': 2}]})
    spec = load_json_model(path, BackboneSpec)
    assert spec.total_stride == 2
    assert spec.nff

    train = load_json_model(write_json('train.json', {'epochs': 3}), TrainConfig,
                            defaults={'epochs': 1, 'batch_size': 2})
    assert (train.epochs, train.batch_size) == (3, 2)

    with pytest.raises(ValueError):
        load_json_model(write_json('extra.json', {'stages': [{'width': 8}], 'depth': 3}),
                        BackboneSpec)
    with pytest.raises(ValueError):
        load_json_model(write_json('list.json', [1, 2]), BackboneSpec)
    with pytest.raises(ValueError):
        load_json_model(write_json('neg.json', {'epochs': -1}), TrainConfig)


@pytest.mark.parametrize("text, expected", [
    ('10MB', 10 * 1024 * 1024),
    ('512kb', 512 * 1024),
    ('2048', 2048),
    ('1.5 GB', int(1.5 * 1024 ** 3)),
    ('lots', 10 * 1024 * 1024),
])
def test_parse_size(text, expected):
    assert parse_size(text) == expected


def test_log_file_carries_command(tmp_path):
    """测试日志文件里带有子命令名"""
    log_file = tmp_path / 'logs' / 'rcmkit.log'
    setup_logging(log_file=str(log_file), level='INFO', console_output=False)
    try:
        set_run_context('decompose')
        get_logger('rcmkit.test').info("转换开始")
    finally:
        set_run_context('-')
        setup_logging(level='WARNING')
    line = log_file.read_text(encoding='utf-8').strip().splitlines()[-1]
    assert '[decompose]' in line
    assert line.endswith("转换开始")


@pytest.fixture
def thread_limits(monkeypatch):
    """记录传给 threadpoolctl 的线程上限, 并清掉相关环境变量"""
    calls = []
    monkeypatch.setattr('src.config.loader.threadpool_limits',
                        lambda limits: calls.append(limits))
    for name in THREAD_ENV_VARS:
        monkeypatch.delenv(name, raising=False)
    monkeypatch.delenv('RCM_THREADS', raising=False)
    return calls


def test_thread_limit_from_config(app_config, thread_limits):
    assert apply_thread_limit(ConfigLoader(app_config)) == 1
    assert thread_limits == [1]
    assert all(os.environ[name] == '1' for name in THREAD_ENV_VARS)


def test_thread_limit_env_override(app_config, thread_limits, monkeypatch):
    monkeypatch.setenv('RCM_THREADS', '3')
    assert apply_thread_limit(ConfigLoader(app_config)) == 3
    assert thread_limits == [3]
    assert os.environ['OMP_NUM_THREADS'] == '3'


def test_cli_applies_thread_limit(app_config, write_json, thread_limits, monkeypatch):
    """测试命令行入口按配置限制线程数"""
    monkeypatch.setenv('RCM_THREADS', '2')
    arch = write_json('arch.json', {'stages': [{'width': 4}]})
    assert main(['--config', str(app_config), 'params', '--arch', str(arch),
                 '--mode', 'rcm', '--tasks', '1']) == 0
    assert thread_limits == [2]
