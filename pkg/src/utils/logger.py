import logging
import os
import re
import sys
import time
from contextlib import contextmanager
from logging.handlers import RotatingFileHandler
from pathlib import Path
from typing import Dict, Iterator, Optional

LOG_FORMAT = '%(asctime)s - [%(command)s] %(name)s - %(levelname)s - %(message)s'
DATE_FORMAT = '%Y-%m-%d %H:%M:%S'
DEFAULT_MAX_BYTES = 10 * 1024 * 1024
_SIZE_PATTERN = re.compile(r'^\s*([0-9]*\.?[0-9]+)\s*([KMG]?B)?\s*$', re.IGNORECASE)
_SIZE_UNITS = {'B': 1, 'KB': 1024, 'MB': 1024 ** 2, 'GB': 1024 ** 3}

_logger_instances: Dict[str, logging.Logger] = {}


class _CommandFilter(logging.Filter):
    """给每条日志加上当前子命令名, 同一日志文件里能区分是哪次运行写的"""

    command = '-'

    def filter(self, record: logging.LogRecord) -> bool:
        record.command = self.command
        return True


_command_filter = _CommandFilter()


def get_logger(name: str = __name__) -> logging.Logger:
    """
    获取或创建logger实例
    :param name: logger名称,通常使用__name__
    """
    if name not in _logger_instances:
        _logger_instances[name] = logging.getLogger(name)
    return _logger_instances[name]


def set_run_context(command: str) -> None:
    """之后的日志都带上子命令名"""
    _CommandFilter.command = command or '-'


def _handler(handler: logging.Handler, level: int) -> logging.Handler:
    handler.setLevel(level)
    handler.setFormatter(logging.Formatter(LOG_FORMAT, datefmt=DATE_FORMAT))
    handler.addFilter(_command_filter)
    return handler


def setup_logging(
    log_file: Optional[str] = None,
    level: str = "INFO",
    max_bytes: int = DEFAULT_MAX_BYTES,
    backup_count: int = 5,
    console_output: bool = True
):
    """
    配置全局日志系统

    控制台日志写到 stderr, stdout 只留给命令结果 (参数表、delta_m 等), 方便管道处理。
    :param log_file: 日志文件路径, 为空时只输出到控制台
    :param level: 日志级别 (DEBUG, INFO, WARNING, ERROR, CRITICAL)
    :param max_bytes: 单个日志文件最大大小(字节)
    :param backup_count: 保留的日志文件数量
    :param console_output: 是否输出到控制台
    """
    numeric_level = getattr(logging, str(level).upper(), logging.INFO)

    root_logger = logging.getLogger()
    root_logger.setLevel(numeric_level)
    root_logger.handlers.clear()

    if console_output:
        root_logger.addHandler(_handler(logging.StreamHandler(sys.stderr), numeric_level))

    if log_file:
        Path(log_file).parent.mkdir(parents=True, exist_ok=True)
        file_handler = RotatingFileHandler(log_file, maxBytes=max_bytes,
                                           backupCount=backup_count, encoding='utf-8')
        root_logger.addHandler(_handler(file_handler, numeric_level))

    root_logger.debug(f"日志系统初始化完成 - 级别: {level}, 文件: {log_file or '未配置'}")


def parse_size(size_str) -> int:
    """
    解析 "10MB", "512KB", "2048" 这类大小为字节数, 无法解析时返回 10MB
    """
    match = _SIZE_PATTERN.match(str(size_str))
    if not match:
        return DEFAULT_MAX_BYTES
    number, unit = match.groups()
    return int(float(number) * _SIZE_UNITS[(unit or 'B').upper()])


def configure_from_dict(config: dict):
    """
    从 app.yaml 的 logging 节配置日志系统, 环境变量 RCM_LOG_LEVEL 优先
    """
    setup_logging(
        log_file=config.get('file'),
        level=os.getenv('RCM_LOG_LEVEL') or config.get('level', 'INFO'),
        max_bytes=parse_size(config.get('max_size', '10MB')),
        backup_count=config.get('backup_count', 5),
        console_output=config.get('console', True)
    )


@contextmanager
def log_duration(logger: logging.Logger, label: str) -> Iterator[Dict[str, float]]:
    """
    记录代码块耗时, 结果写入yield出的字典的 seconds 字段
    :param logger: 输出日志的logger
    :param label: 步骤名称
    """
    record = {'seconds': 0.0}
    logger.debug(f"{label} 开始")
    start = time.perf_counter()
    try:
        yield record
    finally:
        record['seconds'] = time.perf_counter() - start
        logger.info(f"{label} 完成, 耗时 {record['seconds']:.2f}s")


# 默认配置(如果没有调用setup_logging)
if not logging.getLogger().handlers:
    setup_logging(console_output=True, level="WARNING")
