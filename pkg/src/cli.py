import argparse
import logging
import sys
from typing import List, Optional

from dotenv import load_dotenv

from .config import apply_thread_limit
from .models import AdaptationMode
from .service import DECOMPOSE_METHODS, RCMPipelineService, format_parameter_table
from .utils.errors import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, exit_code_for
from .utils.logger import get_logger, set_run_context

logger = get_logger(__name__)


class UsageError(Exception):
    """命令行用法错误"""


class _Parser(argparse.ArgumentParser):
    # argparse 默认以退出码 2 结束进程, 这里改为抛出, 由 main 统一映射为 1
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _csv_list(value: str) -> List[str]:
    return [item.strip() for item in value.split(',') if item.strip()]


def _int_list(value: str) -> List[int]:
    try:
        return [int(item) for item in _csv_list(value)]
    except ValueError:
        raise argparse.ArgumentTypeError(f"应为逗号分隔的整数: {value}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog='rcmkit', description='多任务卷积重参数化实验工具')
    parser.add_argument(
        '--config',
        default=None,
        help='运行配置文件路径 (默认: $RCM_CONFIG 或 config/app.yaml)'
    )
    sub = parser.add_subparsers(dest='command', parser_class=_Parser)
    sub.required = True

    p = sub.add_parser('gen-data', help='生成合成多任务数据集')
    p.add_argument('--config', dest='scene', required=True, help='场景配置 JSON')
    p.add_argument('--out', required=True, help='输出目录')
    p.add_argument('--count', type=int, required=True, help='样本数')
    p.add_argument('--force', action='store_true', help='覆盖已有输出')

    p = sub.add_parser('pretrain', help='分类代理预训练')
    p.add_argument('--data', required=True, help='数据集目录')
    p.add_argument('--arch', required=True, help='骨干结构 JSON')
    p.add_argument('--out', required=True, help='输出检查点')
    p.add_argument('--train', default=None, help='训练配置 JSON')
    p.add_argument('--seed', type=int, default=None, help='覆盖训练配置中的种子')
    p.add_argument('--force', action='store_true', help='覆盖已有输出')

    p = sub.add_parser('decompose', help='转换为 RCM 骨干并做等价性校验')
    p.add_argument('--ckpt', required=True, help='预训练检查点')
    p.add_argument('--probe', required=True, help='探针数据集目录')
    p.add_argument('--out', required=True, help='输出检查点')
    p.add_argument('--tol', type=float, default=None, help='校验阈值 (默认取配置)')
    p.add_argument('--rank', type=int, default=None, help='截断秩 (默认满秩)')
    p.add_argument('--method', choices=DECOMPOSE_METHODS, default='ri', help='分解方式')
    p.add_argument('--seed', type=int, default=0, help='响应采样种子')
    p.add_argument('--force', action='store_true', help='覆盖已有输出')

    p = sub.add_parser('add-task', help='注册新任务 (原地更新检查点)')
    p.add_argument('--ckpt', required=True, help='检查点')
    p.add_argument('--task', required=True, help='任务配置 JSON')
    p.add_argument('--mode', required=True, choices=[m.value for m in AdaptationMode],
                   help='适配模式')
    p.add_argument('--init', choices=['orthogonal_U', 'identity'], default='orthogonal_U',
                   help='RCM 调制器初始化')

    p = sub.add_parser('train', help='训练已注册的任务 (原地更新检查点)')
    p.add_argument('--ckpt', required=True, help='检查点')
    p.add_argument('--task', required=True, help='任务名')
    p.add_argument('--train', default=None, help='训练配置 JSON')
    p.add_argument('--data', required=True, help='数据集目录')
    p.add_argument('--seed', type=int, default=None, help='覆盖训练配置中的种子')

    p = sub.add_parser('eval', help='评估任务指标, 可对比基线')
    p.add_argument('--ckpt', required=True, help='检查点')
    p.add_argument('--tasks', nargs='*', default=None, help='任务名 (默认全部)')
    p.add_argument('--data', required=True, help='数据集目录')
    p.add_argument('--baseline', default=None, help='基线指标 JSON')
    p.add_argument('--out', required=True, help='输出报告 JSON')
    p.add_argument('--force', action='store_true', help='覆盖已有输出')

    p = sub.add_parser('rsa', help='任务梯度表征相似度')
    p.add_argument('--ckpt', required=True, help='检查点')
    p.add_argument('--layer', required=True, help='层名')
    p.add_argument('--data', required=True, help='数据集目录')
    p.add_argument('--m', type=int, default=None, help='小批量数 (默认取配置)')
    p.add_argument('--tasks', nargs='*', default=None, help='任务名 (默认全部)')
    p.add_argument('--seed', type=int, default=0, help='小批量抽样种子')
    p.add_argument('--out', required=True, help='输出 CSV')
    p.add_argument('--force', action='store_true', help='覆盖已有输出')

    p = sub.add_parser('params', help='打印参数量表')
    p.add_argument('--arch', required=True, help='骨干结构 JSON')
    p.add_argument('--mode', required=True, choices=[m.value for m in AdaptationMode],
                   help='适配模式')
    p.add_argument('--tasks', type=int, required=True, help='任务数')
    p.add_argument('--out', default=None, help='另存 JSON')
    p.add_argument('--force', action='store_true', help='覆盖已有输出')

    p = sub.add_parser('verify', help='两个检查点的等价性校验')
    p.add_argument('--a', required=True, help='检查点 A')
    p.add_argument('--b', required=True, help='检查点 B')
    p.add_argument('--task', default=None, help='任务名 (默认比较共享路径)')
    p.add_argument('--tol', type=float, default=None, help='校验阈值 (默认取配置)')
    p.add_argument('--data', default=None, help='输入数据集目录 (默认高斯噪声)')
    p.add_argument('--size', type=int, default=32, help='噪声输入的边长')
    p.add_argument('--seed', type=int, default=0, help='噪声输入种子')
    p.add_argument('--out', default=None, help='另存报告 JSON')
    p.add_argument('--force', action='store_true', help='覆盖已有输出')

    p = sub.add_parser('ablation', help='各适配方式的增量学习对比')
    p.add_argument('--data', required=True, help='数据集目录')
    p.add_argument('--arch', required=True, help='骨干结构 JSON')
    p.add_argument('--out', required=True, help='输出报告 JSON')
    p.add_argument('--train', default=None, help='训练配置 JSON')
    p.add_argument('--seeds', type=_int_list, default=None, help='逗号分隔的种子')
    p.add_argument('--tasks', type=_csv_list, default=None, help='逗号分隔的任务标签')
    p.add_argument('--arms', type=_csv_list, default=None, help='逗号分隔的消融组')
    p.add_argument('--force', action='store_true', help='覆盖已有输出')
    return parser


def run(args: argparse.Namespace, service: RCMPipelineService) -> None:
    """执行一条子命令"""
    if args.command == 'gen-data':
        path = service.gen_data(args.scene, args.out, args.count, force=args.force)
        print(f"数据集已写出: {path.parent}")
    elif args.command == 'pretrain':
        service.pretrain(args.data, args.arch, args.out, args.train, args.seed, force=args.force)
        print(f"检查点已写出: {args.out}")
    elif args.command == 'decompose':
        report = service.decompose(args.ckpt, args.probe, args.out, tol=args.tol,
                                   rank=args.rank, method=args.method, seed=args.seed,
                                   force=args.force)
        print(f"等价性校验通过, 最大偏差 {report.global_max:.3e}")
    elif args.command == 'add-task':
        model = service.add_task(args.ckpt, args.task, args.mode, init=args.init)
        print(f"已注册任务: {', '.join(model.registry.ids())}")
    elif args.command == 'train':
        history = service.train(args.ckpt, args.task, args.train, args.data, args.seed)
        if history:
            last = history[-1]
            print(f"任务 {args.task} 训练完成: loss={last['loss']:.4f}, metric={last['metric']}")
    elif args.command == 'eval':
        payload = service.evaluate(args.ckpt, args.tasks, args.data, args.out,
                                   baseline=args.baseline, force=args.force)
        for task, value in payload['metrics'].items():
            print(f"{task}: {value:.4f}")
        if payload['drop_report'] is not None:
            print(f"delta_m: {payload['drop_report']['delta_m']:.2f}%")
    elif args.command == 'rsa':
        matrix = service.rsa(args.ckpt, args.layer, args.data, args.out, m=args.m,
                             tasks=args.tasks, seed=args.seed, force=args.force)
        print(f"RSA 矩阵已写出: {args.out} ({len(matrix.tasks)} 个任务)")
    elif args.command == 'params':
        count = service.params(args.arch, args.mode, args.tasks, out=args.out, force=args.force)
        print(format_parameter_table(count))
    elif args.command == 'verify':
        report = service.verify(args.a, args.b, task=args.task, tol=args.tol, data_dir=args.data,
                                image_size=args.size, seed=args.seed, out=args.out,
                                force=args.force)
        print(f"等价性校验通过, 最大偏差 {report.global_max:.3e}")
    elif args.command == 'ablation':
        payload = service.ablation(args.data, args.arch, args.out, train_path=args.train,
                                   seeds=args.seeds, tasks=args.tasks, arms=args.arms,
                                   force=args.force)
        for arm, value in payload['mean_delta_m'].items():
            print(f"{arm}: delta_m={'n/a' if value is None else f'{value:.2f}%'}")


def main(argv: Optional[List[str]] = None) -> int:
    """主函数, 返回退出码"""
    load_dotenv()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE

    try:
        set_run_context(args.command)
        # 创建服务实例
        service = RCMPipelineService(config_file=args.config)
        apply_thread_limit(service.config)
        service.argv = argv
        run(args, service)
    except KeyboardInterrupt:
        print("\n程序被用户中断")
        return EXIT_RUNTIME
    except Exception as e:
        code = exit_code_for(e)
        # DEBUG 级别才输出堆栈
        logger.error(f"{args.command} 失败 ({type(e).__name__}): {e}",
                     exc_info=logging.getLogger().isEnabledFor(logging.DEBUG))
        return code
    return EXIT_OK
