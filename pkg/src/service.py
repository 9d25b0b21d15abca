import csv
import hashlib
import json
import subprocess
import time
from datetime import datetime
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

from src.analysis import RSAMatrix, capture_task_gradients, delta_m, rsa_correlation
from src.config.loader import get_config, load_json_model
from src.data import (
    CLASS_IDS,
    generate_dataset,
    load_checkpoint,
    load_dataset,
    save_checkpoint,
    save_dataset,
)
from src.layers import Backbone
from src.models import (
    AdaptationMode,
    BackboneSpec,
    DropReport,
    EquivalenceReport,
    ParameterCount,
    RunManifest,
    SceneConfig,
    TaskSpec,
    TrainConfig,
)
from src.reparam import (
    ProbeSet,
    factored_conversion,
    identity_conversion,
    response_initialize,
    verify_equivalence,
)
from src.tasks import evaluate_task, parameter_count, pretrain, register_task, train_task
from src.utils.errors import GateFailure, TaskError
from src.utils.logger import configure_from_dict, get_logger

PathLike = Union[str, Path]

# add-task 在普通骨干上遇到这些模式时先转换结构
ADAPTER_TOPOLOGIES = {
    AdaptationMode.SERIES_RA: 'series',
    AdaptationMode.PARALLEL_RA: 'parallel',
}

DECOMPOSE_METHODS = ('ri', 'identity', 'factored')

# 消融实验的各组: (名称, 适配模式, 转换方式)
ABLATION_ARMS = [
    ('freeze', AdaptationMode.FREEZE_ENCODER, None),
    ('bn-only', AdaptationMode.TASK_SPECIFIC_BN, None),
    ('conv-only', AdaptationMode.TASK_SPECIFIC_CONV, None),
    ('single', AdaptationMode.SINGLE_TASK, None),
    ('rcm-identity', AdaptationMode.RCM, 'identity'),
    ('rcm-ri', AdaptationMode.RCM, 'ri'),
    ('series-ra', AdaptationMode.SERIES_RA, 'series'),
    ('parallel-ra', AdaptationMode.PARALLEL_RA, 'parallel'),
]
BASELINE_ARM = 'single'
ABLATION_TRAIN_FRACTION = 0.8


def git_describe() -> str:
    """当前代码版本, 不在 git 仓库里时返回 unknown"""
    try:
        result = subprocess.run(['git', 'describe', '--always', '--dirty'],
                                capture_output=True, text=True, timeout=5)
    except (OSError, subprocess.SubprocessError):
        return 'unknown'
    return result.stdout.strip() if result.returncode == 0 and result.stdout.strip() else 'unknown'


def config_hash(files: Sequence[Optional[PathLike]], params: dict) -> str:
    """输入配置文件内容与命令参数的 sha256"""
    digest = hashlib.sha256()
    for file in files:
        if file is None:
            continue
        path = Path(file)
        digest.update(str(path.name).encode('utf-8'))
        if path.is_file():
            digest.update(path.read_bytes())
    digest.update(json.dumps(params, sort_keys=True, default=str).encode('utf-8'))
    return digest.hexdigest()


def manifest_path(output: PathLike, command: str) -> Path:
    output = Path(output)
    return output.with_name(f"{output.name}.{command}.manifest.json")


def write_json(path: PathLike, payload) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, ensure_ascii=False) + '\n', encoding='utf-8')
    return path


def read_baseline(path: PathLike) -> Dict[str, float]:
    """读取 eval 写出的指标 JSON (或扁平的 {任务: 指标})"""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"基线文件不存在: {path}")
    data = json.loads(path.read_text(encoding='utf-8'))
    metrics = data.get('metrics', data) if isinstance(data, dict) else None
    if not isinstance(metrics, dict):
        raise ValueError(f"{path} 中没有指标表")
    try:
        return {str(task): float(value) for task, value in metrics.items()}
    except (TypeError, ValueError) as e:
        raise ValueError(f"{path} 中的指标必须是数值: {e}")


def write_drop_csv(path: PathLike, report: DropReport) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', newline='', encoding='utf-8') as f:
        writer = csv.writer(f)
        writer.writerow(['task', 'model', 'baseline', 'direction', 'drop'])
        for task, entry in report.per_task.items():
            writer.writerow([task, f"{entry.model:.6f}", f"{entry.baseline:.6f}",
                             entry.direction.value, f"{entry.drop:.4f}"])
        writer.writerow(['delta_m', '', '', '', f"{report.delta_m:.4f}"])
    return path


def format_parameter_table(count: ParameterCount) -> str:
    """参数量表格 (不含任务头)"""
    lines = [f"模式 {count.mode.value}, 任务数 {count.tasks}",
             f"{'层':<10}{'k':>3}{'c_in':>6}{'c_out':>6}{'共享':>10}{'每任务':>10}"]
    for layer in count.layers:
        lines.append(f"{layer.name:<10}{layer.k:>3}{layer.c_in:>6}{layer.c_out:>6}"
                     f"{layer.shared:>10}{layer.per_task:>10}")
    lines.append(f"{'卷积权重':<10}{'':>15}{count.weights_shared:>10}{count.weights_per_task:>10}"
                 f"  合计 {count.weights_total}")
    lines.append(f"{'全部参数':<10}{'':>15}{count.shared:>10}{count.per_task:>10}"
                 f"  合计 {count.total}")
    return '\n'.join(lines)


class RCMPipelineService:
    """多任务卷积实验流水线: 每个方法对应一条 CLI 命令"""

    def __init__(self, config_file: Optional[str] = None):
        # 加载配置
        self.config = get_config(config_file)

        # 初始化日志
        configure_from_dict(self.config.get_logging_config())
        self.logger = get_logger(__name__)

        # 验证配置
        if not self.config.validate():
            raise ValueError("配置验证失败,请检查配置文件")

        self.argv: List[str] = []
        self.dtype = np.dtype(self.config.get('runtime.dtype', 'float32'))
        self.logger.debug(f"流水线服务初始化完成, 配置 {self.config.config_file}")

    # ------------------------------------------------------------ 通用

    def _check_output(self, path: PathLike, force: bool) -> Path:
        path = Path(path)
        if path.exists() and not force:
            self.logger.error(f"输出已存在: {path}")
            raise ValueError(f"输出已存在: {path} (使用 --force 覆盖)")
        return path

    def _write_manifest(self, command: str, primary: PathLike, outputs: Sequence[PathLike],
                        digest: str, seed: Optional[int], started: datetime,
                        start_clock: float) -> Path:
        manifest = RunManifest(
            command=command,
            argv=list(self.argv),
            config_hash=digest,
            seed=seed,
            git_describe=git_describe(),
            outputs=[str(p) for p in outputs],
            started_at=started.isoformat(timespec='seconds'),
            wall_clock=round(time.perf_counter() - start_clock, 3),
        )
        path = write_json(manifest_path(primary, command), manifest.model_dump(mode='json'))
        self.logger.debug(f"运行清单: {path}")
        return path

    def _train_config(self, path: Optional[PathLike], seed: Optional[int] = None) -> TrainConfig:
        defaults = self.config.get_train_defaults()
        if path is None:
            config = TrainConfig.model_validate(defaults)
        else:
            config = load_json_model(path, TrainConfig, defaults)
        if seed is not None:
            config = config.model_copy(update={'seed': seed})
        return config

    def _probe(self, directory: PathLike, seed: int = 0) -> ProbeSet:
        dataset = load_dataset(directory)
        return ProbeSet(dataset.images.astype(self.dtype), seed=seed,
                        batch_size=int(self.config.get('defaults.probe.batch_size', 16)))

    def _probe_options(self) -> dict:
        return {
            'min_samples': int(self.config.get('defaults.probe.min_samples')),
            'oversampling': int(self.config.get('defaults.probe.oversampling')),
        }

    # ------------------------------------------------------------ 命令

    def gen_data(self, config_path: PathLike, out: PathLike, count: int,
                 force: bool = False) -> Path:
        """生成合成多任务数据集"""
        started, clock = datetime.now(), time.perf_counter()
        scene = load_json_model(config_path, SceneConfig)
        samples = generate_dataset(scene, count)
        manifest = save_dataset(samples, out, scene, force=force)
        digest = config_hash([config_path], {'count': count})
        self._write_manifest('gen-data', out, [out], digest, scene.seed, started, clock)
        return manifest

    def pretrain(self, data_dir: PathLike, arch_path: PathLike, out: PathLike,
                 train_path: Optional[PathLike] = None, seed: Optional[int] = None,
                 force: bool = False) -> Backbone:
        """分类代理预训练普通骨干"""
        started, clock = datetime.now(), time.perf_counter()
        out = self._check_output(out, force)
        spec = load_json_model(arch_path, BackboneSpec)
        config = self._train_config(train_path, seed)
        dataset = load_dataset(data_dir)
        model = Backbone(spec, seed=config.seed, dtype=self.dtype)
        history = pretrain(model, dataset, config, num_classes=len(CLASS_IDS))
        save_checkpoint(model, out)
        history_path = write_json(out.with_name(out.name + '.history.json'),
                                  [record.to_dict() for record in history])
        digest = config_hash([arch_path, train_path], {'data': str(data_dir)})
        self._write_manifest('pretrain', out, [out, history_path], digest, config.seed,
                             started, clock)
        return model

    def decompose(self, ckpt: PathLike, probe_dir: PathLike, out: PathLike,
                  tol: Optional[float] = None, rank: Optional[int] = None, method: str = 'ri',
                  seed: int = 0, force: bool = False) -> EquivalenceReport:
        """
        普通骨干转 RCM 骨干, 再与原模型做等价性校验
        校验未通过时不写检查点, 抛出 GateFailure
        """
        started, clock = datetime.now(), time.perf_counter()
        if method not in DECOMPOSE_METHODS:
            raise ValueError(f"未知的分解方式: {method}, 可选: {list(DECOMPOSE_METHODS)}")
        out = self._check_output(out, force)
        tol = float(self.config.get('defaults.verify.tol') if tol is None else tol)
        model = load_checkpoint(ckpt)
        probe = self._probe(probe_dir, seed)

        if method == 'ri':
            converted = response_initialize(model, probe, rank=rank, **self._probe_options())
        elif method == 'identity':
            converted = identity_conversion(model)
        else:
            converted = factored_conversion(model)

        inputs = probe.images[:int(self.config.get('defaults.verify.inputs', 20))]
        report = verify_equivalence(model, converted, None, inputs, tol)
        report_path = write_json(out.with_name(out.name + '.equivalence.json'),
                                 report.model_dump(mode='json'))
        if not report.passed:
            self.logger.error(f"等价性校验未通过, 未写出 {out}")
            raise GateFailure(f"分解后最大偏差 {report.global_max:.3e} 超过阈值 {tol:g}")

        save_checkpoint(converted, out)
        digest = config_hash([ckpt], {'probe': str(probe_dir), 'tol': tol, 'rank': rank,
                                      'method': method, 'seed': seed})
        self._write_manifest('decompose', out, [out, report_path], digest, seed, started, clock)
        return report

    def add_task(self, ckpt: PathLike, task_path: PathLike, mode: Union[str, AdaptationMode],
                 init: str = 'orthogonal_U') -> Backbone:
        """
        在检查点上注册新任务 (原地更新)
        普通骨干上第一次注册 RA 任务时先换成对应的适配器结构
        """
        started, clock = datetime.now(), time.perf_counter()
        mode = AdaptationMode(mode)
        digest = config_hash([ckpt, task_path], {'mode': mode.value, 'init': init})
        spec = load_json_model(task_path, TaskSpec)
        model = load_checkpoint(ckpt)
        if model.kind == 'plain' and mode in ADAPTER_TOPOLOGIES:
            if len(model.registry):
                raise TaskError(f"已注册任务 {model.registry.ids()}, 不能再转换为适配器骨干")
            model = model.to_adapters(ADAPTER_TOPOLOGIES[mode])
        if model.kind == 'plain' and mode == AdaptationMode.RCM:
            raise TaskError("rcm 模式需要先用 decompose 转换骨干")
        register_task(model, spec, mode, init=init)
        save_checkpoint(model, ckpt)
        self._write_manifest('add-task', ckpt, [ckpt], digest, model.seed, started, clock)
        return model

    def train(self, ckpt: PathLike, task: str, train_path: Optional[PathLike],
              data_dir: PathLike, seed: Optional[int] = None) -> List[dict]:
        """训练一个已注册的任务 (原地更新检查点)"""
        started, clock = datetime.now(), time.perf_counter()
        config = self._train_config(train_path, seed)
        digest = config_hash([ckpt, train_path], {'task': task, 'data': str(data_dir),
                                                  'seed': config.seed})
        model = load_checkpoint(ckpt)
        dataset = load_dataset(data_dir)
        history = [record.to_dict() for record in train_task(model, task, dataset, config)]
        save_checkpoint(model, ckpt)
        ckpt = Path(ckpt)
        history_path = write_json(ckpt.with_name(f"{ckpt.name}.{task}.history.json"), history)
        self._write_manifest('train', ckpt, [ckpt, history_path], digest, config.seed,
                             started, clock)
        return history

    def evaluate(self, ckpt: PathLike, tasks: Optional[Sequence[str]], data_dir: PathLike,
                 out: PathLike, baseline: Optional[PathLike] = None,
                 force: bool = False) -> dict:
        """
        评估任务指标, 给出基线时同时输出 DropReport (JSON + CSV)
        写出的 JSON 可直接作为后续运行的 --baseline
        """
        started, clock = datetime.now(), time.perf_counter()
        out = self._check_output(out, force)
        model = load_checkpoint(ckpt)
        dataset = load_dataset(data_dir)
        tasks = list(tasks) if tasks else model.registry.ids()
        if not tasks:
            raise TaskError("模型上没有已注册的任务")

        metrics = {task: evaluate_task(model, task, dataset) for task in tasks}
        directions = {task: model.registry.get(task).spec.direction.value for task in tasks}
        for task, value in metrics.items():
            self.logger.info(f"任务 {task}: {model.registry.get(task).spec.metric.value}="
                             f"{value:.4f}")

        payload = {'metrics': metrics, 'directions': directions, 'drop_report': None}
        outputs: List[PathLike] = [out]
        if baseline is not None:
            reference = read_baseline(baseline)
            missing = [task for task in tasks if task not in reference]
            if missing:
                raise ValueError(f"基线中缺少这些任务: {missing}")
            report = delta_m(metrics, {task: reference[task] for task in tasks}, directions)
            payload['drop_report'] = report.model_dump(mode='json')
            outputs.append(write_drop_csv(out.with_suffix('.csv'), report))
            self.logger.info(f"Δ_m = {report.delta_m:.2f}%")

        write_json(out, payload)
        digest = config_hash([ckpt, baseline], {'tasks': tasks, 'data': str(data_dir)})
        self._write_manifest('eval', out, outputs, digest, model.seed, started, clock)
        return payload

    def rsa(self, ckpt: PathLike, layer: str, data_dir: PathLike, out: PathLike,
            m: Optional[int] = None, tasks: Optional[Sequence[str]] = None, seed: int = 0,
            force: bool = False) -> RSAMatrix:
        """各任务在某层共享权重上的梯度表征相似度"""
        started, clock = datetime.now(), time.perf_counter()
        out = self._check_output(out, force)
        m = int(self.config.get('defaults.rsa.m') if m is None else m)
        batch_size = int(self.config.get('defaults.rsa.batch_size', 16))
        model = load_checkpoint(ckpt)
        dataset = load_dataset(data_dir)
        tasks = list(tasks) if tasks else model.registry.ids()
        sets = [capture_task_gradients(model, task, layer, dataset, m=m, batch_size=batch_size,
                                       seed=seed) for task in tasks]
        matrix = rsa_correlation(sets)
        matrix.meta.update({'m': m, 'batch_size': batch_size, 'seed': seed})
        matrix.save(out)
        digest = config_hash([ckpt], {'layer': layer, 'tasks': tasks, 'm': m, 'seed': seed,
                                      'data': str(data_dir)})
        self._write_manifest('rsa', out, [out, out.with_suffix('.json')], digest, seed,
                             started, clock)
        return matrix

    def params(self, arch_path: PathLike, mode: Union[str, AdaptationMode], tasks: int,
               out: Optional[PathLike] = None, force: bool = False) -> ParameterCount:
        """参数量统计, 给出 out 时另存 JSON"""
        started, clock = datetime.now(), time.perf_counter()
        spec = load_json_model(arch_path, BackboneSpec)
        count = parameter_count(spec, tasks, AdaptationMode(mode))
        if out is not None:
            out = self._check_output(out, force)
            write_json(out, count.model_dump(mode='json'))
            digest = config_hash([arch_path], {'mode': count.mode.value, 'tasks': tasks})
            self._write_manifest('params', out, [out], digest, None, started, clock)
        return count

    def verify(self, a: PathLike, b: PathLike, task: Optional[str] = None,
               tol: Optional[float] = None, data_dir: Optional[PathLike] = None,
               image_size: int = 32, seed: int = 0, out: Optional[PathLike] = None,
               force: bool = False) -> EquivalenceReport:
        """
        两个检查点的逐层等价性校验, 未通过时抛出 GateFailure
        输入取数据集的前若干张图, 未给数据集时用固定种子的高斯噪声
        """
        started, clock = datetime.now(), time.perf_counter()
        tol = float(self.config.get('defaults.verify.tol') if tol is None else tol)
        count = int(self.config.get('defaults.verify.inputs', 20))
        model_a, model_b = load_checkpoint(a), load_checkpoint(b)
        if data_dir is not None:
            inputs = load_dataset(data_dir).images[:count]
        else:
            rng = np.random.default_rng(seed)
            inputs = rng.standard_normal((count, model_a.spec.in_channels, image_size, image_size))
        report = verify_equivalence(model_a, model_b, task, inputs.astype(self.dtype), tol)
        if out is not None:
            out = self._check_output(out, force)
            write_json(out, report.model_dump(mode='json'))
            digest = config_hash([a, b], {'task': task, 'tol': tol, 'seed': seed,
                                          'data': str(data_dir)})
            self._write_manifest('verify', out, [out], digest, seed, started, clock)
        if not report.passed:
            raise GateFailure(f"最大偏差 {report.global_max:.3e} 超过阈值 {tol:g}")
        return report

    # ------------------------------------------------------------ 消融

    def _arm_model(self, pretrained: Backbone, conversion: Optional[str],
                   probe: ProbeSet) -> Backbone:
        if conversion is None:
            return pretrained.copy()
        if conversion == 'identity':
            return identity_conversion(pretrained)
        if conversion == 'ri':
            if pretrained.spec.factored:
                return factored_conversion(pretrained)
            return response_initialize(pretrained, probe, **self._probe_options())
        return pretrained.to_adapters(conversion)

    def _summarize_ablation(self, results: Dict[str, Dict[str, dict]],
                            directions: Dict[str, str]) -> Dict[str, Optional[float]]:
        """
        逐组逐种子计算相对基线的 Δ_m, 结果写回 results
        基线指标为 0 时该条目记为 None 并附上原因, 不中断其余组
        """
        summary: Dict[str, Optional[float]] = {}
        for name, per_seed in results.items():
            drops = []
            for seed_key, entry in per_seed.items():
                baseline = results[BASELINE_ARM][seed_key]['metrics']
                try:
                    report = delta_m(entry['metrics'], baseline, directions)
                except ValueError as e:
                    self.logger.warning(f"{name} (种子 {seed_key}) 无法计算 Δ_m: {e}")
                    entry['delta_m'] = None
                    entry['error'] = str(e)
                    continue
                entry['delta_m'] = report.delta_m
                drops.append(report.delta_m)
            summary[name] = float(np.mean(drops)) if drops else None
            if drops:
                self.logger.info(f"{name}: 平均 Δ_m = {summary[name]:.2f}%")
        return summary

    def ablation(self, data_dir: PathLike, arch_path: PathLike, out: PathLike,
                 train_path: Optional[PathLike] = None, seeds: Optional[Sequence[int]] = None,
                 tasks: Optional[Sequence[str]] = None, arms: Optional[Sequence[str]] = None,
                 force: bool = False) -> dict:
        """
        各适配方式在同一预训练骨干上逐个加入任务并训练, 以单任务组为基线报告 Δ_m
        数据前 80% 训练, 其余评估; 每个种子各自预训练
        """
        started, clock = datetime.now(), time.perf_counter()
        out = self._check_output(out, force)
        seeds = list(seeds if seeds is not None else self.config.get('defaults.ablation.seeds', [0]))
        labels = list(tasks or self.config.get('defaults.ablation.tasks', []))
        if not labels:
            raise ValueError("消融实验至少需要一个任务")
        known = [name for name, _, _ in ABLATION_ARMS]
        chosen = list(arms) if arms else known
        unknown = sorted(set(chosen) - set(known))
        if unknown:
            raise ValueError(f"未知的消融组: {unknown}, 可选: {known}")
        if BASELINE_ARM not in chosen:
            chosen.append(BASELINE_ARM)

        spec = load_json_model(arch_path, BackboneSpec)
        dataset = load_dataset(data_dir)
        split = max(1, int(len(dataset) * ABLATION_TRAIN_FRACTION))
        if split >= len(dataset):
            raise ValueError(f"数据集太小 ({len(dataset)}), 无法划分训练/评估集")
        train_set = dataset.subset(np.arange(split))
        eval_set = dataset.subset(np.arange(split, len(dataset)))
        task_specs = [TaskSpec.preset(label) for label in labels]
        directions = {s.id: s.direction.value for s in task_specs}

        results: Dict[str, Dict[str, dict]] = {arm: {} for arm in chosen}
        for seed in seeds:
            config = self._train_config(train_path, seed)
            pretrained = Backbone(spec, seed=seed, dtype=self.dtype)
            pretrain(pretrained, train_set, config, num_classes=len(CLASS_IDS))
            probe = ProbeSet(train_set.images, seed=seed,
                             batch_size=int(self.config.get('defaults.probe.batch_size', 16)))

            for name, mode, conversion in ABLATION_ARMS:
                if name not in chosen:
                    continue
                self.logger.info(f"消融组 {name}, 种子 {seed}")
                model = self._arm_model(pretrained, conversion, probe)
                metrics = {}
                for task_spec in task_specs:
                    register_task(model, task_spec, mode)
                    train_task(model, task_spec.id, train_set, config,
                               evaluate_every_epoch=False)
                # 全部任务加完再评估, 检验增量加入是否影响旧任务
                for task_spec in task_specs:
                    metrics[task_spec.id] = evaluate_task(model, task_spec.id, eval_set)
                results[name][str(seed)] = {'metrics': metrics}

        summary = self._summarize_ablation(results, directions)
        payload = {'tasks': [s.id for s in task_specs], 'seeds': seeds, 'baseline': BASELINE_ARM,
                   'arms': results, 'mean_delta_m': summary}
        write_json(out, payload)
        csv_path = out.with_suffix('.csv')
        with open(csv_path, 'w', newline='', encoding='utf-8') as f:
            writer = csv.writer(f)
            writer.writerow(['arm', 'seed', *payload['tasks'], 'delta_m'])
            for name in chosen:
                for seed_key, entry in results[name].items():
                    drop = entry['delta_m']
                    writer.writerow([name, seed_key,
                                     *[f"{entry['metrics'][t]:.6f}" for t in payload['tasks']],
                                     '' if drop is None else f"{drop:.4f}"])
        digest = config_hash([arch_path, train_path], {'seeds': seeds, 'tasks': labels,
                                                       'arms': chosen, 'data': str(data_dir)})
        self._write_manifest('ablation', out, [out, csv_path], digest,
                             seeds[0] if seeds else None, started, clock)
        return payload
