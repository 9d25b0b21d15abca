import json
import os
from functools import reduce
from pathlib import Path
from typing import Any, Dict, Literal, Optional, Type, TypeVar, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, PositiveFloat, PositiveInt, ValidationError
from threadpoolctl import threadpool_limits

from ..utils.logger import get_logger

logger = get_logger(__name__)

DEFAULT_CONFIG_FILE = "config/app.yaml"

# 受 runtime.threads 约束的原生线程池
THREAD_ENV_VARS = ('OMP_NUM_THREADS', 'OPENBLAS_NUM_THREADS', 'MKL_NUM_THREADS')

# 环境变量 -> (配置键, 类型)
ENV_OVERRIDES = {
    'RCM_THREADS': ('runtime.threads', int),
    'RCM_LOG_LEVEL': ('logging.level', str),
}

ModelT = TypeVar('ModelT', bound=BaseModel)
_MISSING = object()


class _Section(BaseModel):
    model_config = ConfigDict(extra='allow')


class _LoggingSection(_Section):
    level: str


class _RuntimeSection(_Section):
    threads: PositiveInt = 1
    dtype: Literal['float32', 'float64'] = 'float32'


class _ProbeDefaults(_Section):
    min_samples: PositiveInt
    oversampling: PositiveInt
    batch_size: PositiveInt = 16


class _RSADefaults(_Section):
    m: int = Field(ge=2)
    batch_size: PositiveInt = 16


class _VerifyDefaults(_Section):
    tol: PositiveFloat
    inputs: PositiveInt = 20


class _Defaults(_Section):
    probe: _ProbeDefaults
    rsa: _RSADefaults
    verify: _VerifyDefaults
    train: Dict[str, Any] = {}
    ablation: Dict[str, Any] = {}


class _AppConfig(_Section):
    """app.yaml 的结构, 只约束程序真正读取的键"""
    logging: _LoggingSection
    runtime: _RuntimeSection = _RuntimeSection()
    defaults: _Defaults


class ConfigLoader:
    """运行配置加载器 (YAML), 支持点分隔键与环境变量覆盖"""

    def __init__(self, config_file: Union[str, Path] = DEFAULT_CONFIG_FILE):
        self.config_file = Path(config_file)
        self._config: Optional[Dict[str, Any]] = None

    @property
    def data(self) -> Dict[str, Any]:
        if self._config is None:
            self.load()
        return self._config

    def load(self) -> Dict[str, Any]:
        """
        加载配置文件并应用环境变量覆盖
        :return: 配置字典
        """
        if not self.config_file.exists():
            logger.error(f"配置文件不存在: {self.config_file}")
            raise FileNotFoundError(f"配置文件不存在: {self.config_file}")

        try:
            with open(self.config_file, 'r', encoding='utf-8') as f:
                self._config = yaml.safe_load(f) or {}
        except yaml.YAMLError as e:
            logger.error(f"YAML解析错误: {e}")
            raise ValueError(f"配置文件格式错误: {e}")

        for env, (key, cast) in ENV_OVERRIDES.items():
            raw = os.getenv(env)
            if raw:
                self._set(key, cast(raw))
                logger.debug(f"{env} 覆盖 {key} = {raw}")
        logger.debug(f"成功加载配置文件: {self.config_file}")
        return self._config

    def _set(self, key: str, value: Any) -> None:
        *parents, leaf = key.split('.')
        node = reduce(lambda d, k: d.setdefault(k, {}), parents, self._config)
        node[leaf] = value

    def get(self, key: str, default: Any = None) -> Any:
        """
        获取配置项
        :param key: 点分隔的多级键, 如 "defaults.probe.min_samples"
        :param default: 键不存在时的返回值
        """
        value = reduce(lambda d, k: d.get(k, _MISSING) if isinstance(d, dict) else _MISSING,
                       key.split('.'), self.data)
        return default if value is _MISSING or value is None else value

    def get_logging_config(self) -> Dict[str, Any]:
        return self.get('logging', {})

    def get_train_defaults(self) -> Dict[str, Any]:
        """TrainConfig 的默认值, 实验配置文件中的字段会覆盖它们"""
        return dict(self.get('defaults.train', {}))

    def validate(self) -> bool:
        """
        检查必需项与取值范围, 问题逐条写入日志
        :return: 是否有效
        """
        try:
            _AppConfig.model_validate(self.data)
        except ValidationError as e:
            for error in e.errors():
                key = '.'.join(str(part) for part in error['loc'])
                logger.error(f"配置项 {key} 无效: {error['msg']}")
            return False
        logger.debug("配置验证通过")
        return True

    def __repr__(self) -> str:
        return f"ConfigLoader(config_file='{self.config_file}')"


# 全局配置实例
_global_config: Optional[ConfigLoader] = None


def get_config(config_file: Optional[str] = None) -> ConfigLoader:
    """
    获取全局配置实例, 路径优先取参数, 其次 RCM_CONFIG, 最后 config/app.yaml
    :param config_file: 配置文件路径
    :return: 配置加载器实例
    """
    global _global_config

    if _global_config is None or config_file is not None:
        _global_config = ConfigLoader(config_file or os.getenv('RCM_CONFIG', DEFAULT_CONFIG_FILE))
        _global_config.load()

    return _global_config


def apply_thread_limit(config: ConfigLoader) -> int:
    """
    按 runtime.threads (RCM_THREADS 优先) 限制 BLAS/OpenMP 线程数
    numpy 已加载时通过 threadpoolctl 生效, 环境变量留给子进程
    :return: 生效的线程数
    """
    threads = int(config.get('runtime.threads', 1))
    if threads < 1:
        raise ValueError(f"runtime.threads 必须为正整数, 实际 {threads}")
    for name in THREAD_ENV_VARS:
        os.environ.setdefault(name, str(threads))
    threadpool_limits(limits=threads)
    logger.debug(f"计算线程数上限: {threads}")
    return threads


def load_json_model(path: Union[str, Path], model: Type[ModelT],
                    defaults: Optional[Dict[str, Any]] = None) -> ModelT:
    """
    读取 JSON 实验配置并用 pydantic 校验 (未知字段直接报错)
    :param defaults: 文件中未给出的字段使用的默认值
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"配置文件不存在: {path}")
    try:
        data = json.loads(path.read_text(encoding='utf-8'))
    except json.JSONDecodeError as e:
        raise ValueError(f"{path} 不是合法的 JSON: {e}")
    if not isinstance(data, dict):
        raise ValueError(f"{path} 顶层必须是对象")
    merged = {**(defaults or {}), **data}
    try:
        return model.model_validate(merged)
    except ValidationError as e:
        raise ValueError(f"{path} 校验失败: {e}") from e
