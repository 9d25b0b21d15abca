"""
异常分类, CLI 据此映射退出码:
1 用法错误, 2 校验/门限失败, 3 运行时错误(非有限值, I/O)
"""

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_VALIDATION = 2
EXIT_RUNTIME = 3


class ShapeError(ValueError):
    """张量形状或 dtype 不满足算子约定"""


class TaskError(KeyError):
    """任务未注册、重复注册或与模型结构不兼容"""

    def __str__(self) -> str:
        # KeyError 默认会给消息加引号
        return str(self.args[0]) if self.args else ''


class GateFailure(ValueError):
    """等价性校验未通过"""


class NonFiniteError(FloatingPointError):
    """计算中出现 NaN/Inf"""


class GraphError(RuntimeError):
    """计算图使用顺序错误(未前向就反向, 或未清零重复反向)"""


class ConvergenceError(RuntimeError):
    """迭代求解器在预算内未收敛"""


class CheckpointError(OSError):
    """检查点文件损坏、截断或版本不符"""


def exit_code_for(error: BaseException) -> int:
    """
    异常到退出码的映射
    :param error: 捕获到的异常
    :return: 退出码
    """
    if isinstance(error, (ValueError, KeyError)):
        return EXIT_VALIDATION
    return EXIT_RUNTIME
