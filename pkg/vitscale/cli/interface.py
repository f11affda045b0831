import argparse
import json
import sys
from typing import Optional, Sequence

from prettytable import PrettyTable

from vitscale.core.costs import (
    OPTIMIZER_MODES,
    GridSpec,
    MemoryModel,
    cost_report,
    shapefind,
)
from vitscale.core.exceptions import ConfigurationError, ContractError
from vitscale.core.models import ShapeConfig
from vitscale.core.probe import evaluate_probe, fit_probe, kshot_sample, kshot_split
from vitscale.core.scaling import (
    FitOptions,
    best_per_compute,
    fit_curve,
    fit_law,
    pareto_frontier,
)
from vitscale.core.schedules import (
    DECAY_TYPES,
    ScheduleConfig,
    cooldown_branch,
    dump_schedule,
)
from vitscale.core.utils import GIB, format_number
from vitscale.decorators import handle_command_errors
from vitscale.infra.settings import SettingsLoader


def _int_list(text: str):
    try:
        return tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"ожидается список целых: '{text}'") from None


def _add_json(parser: argparse.ArgumentParser) -> None:
    # флаг разрешен и до, и после имени подкоманды
    parser.add_argument(
        "--json",
        action="store_true",
        default=argparse.SUPPRESS,
        help="Вывести результат в JSON вместо таблицы"
    )


def _add_data_arguments(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--n-per-class", type=int, default=64,
                        help="Примеров на класс синтетической задачи (по умолчанию 64)")
    parser.add_argument("--noise", type=float, default=0.05,
                        help="Sigma гауссова шума (по умолчанию 0.05)")
    parser.add_argument("--data-seed", type=int, default=0,
                        help="Seed генератора данных (по умолчанию 0)")
    parser.add_argument("--gap", type=float, default=1.0,
                        help="Масштаб шаблонов классов (по умолчанию 1.0)")
    parser.add_argument("--idx-images", help="IDX файл изображений вместо синтетики")
    parser.add_argument("--idx-labels", help="IDX файл меток к --idx-images")


def _add_shape_arguments(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--variant", help="Модель из таблицы архитектур, например B/16")
    parser.add_argument("--width", type=int, help="Ширина эмбеддингов")
    parser.add_argument("--depth", type=int, help="Число блоков энкодера")
    parser.add_argument("--mlp", type=int, help="Ширина MLP")
    parser.add_argument("--heads", type=int, help="Число голов внимания")
    parser.add_argument("--patch", type=int, help="Размер патча")
    parser.add_argument("--head", "--head-type", dest="head", default="MAP",
                        help="Тип головы: CLS, GAP или MAP")
    parser.add_argument("--classes", type=int, default=1000,
                        help="Число классов (по умолчанию 1000)")
    parser.add_argument("--map-mlp", action="store_true",
                        help="Добавить MLP внутрь MAP головы")


def create_parser() -> argparse.ArgumentParser:

    parser = argparse.ArgumentParser(
        prog="vitscale",
        description="Модель стоимости ViT, аппроксимация законов масштабирования, "
                    "игрушечное обучение и few-shot проба",
        formatter_class=argparse.RawDescriptionHelpFormatter
    )
    parser.add_argument("--json", action="store_true", default=False,
                        help="Вывести результат в JSON вместо таблицы")

    subparsers = parser.add_subparsers(dest="command", help="Доступные команды")

    # команда cost
    cost_parser = subparsers.add_parser(
        "cost",
        help="Параметры, FLOPs, токены и память для одной формы"
    )
    _add_shape_arguments(cost_parser)
    cost_parser.add_argument("--res", type=int, default=224,
                             help="Разрешение (по умолчанию 224)")
    cost_parser.add_argument("--batch", type=int, default=1,
                             help="Batch на устройство для учета памяти")
    cost_parser.add_argument("--count-gradients", action="store_true",
                             help="Учитывать градиенты в проверке бюджета")
    cost_parser.add_argument("--optimizer", choices=OPTIMIZER_MODES,
                             help="Показать память только для одного режима")
    cost_parser.add_argument("--budget-gib", type=float,
                             help="Бюджет памяти в GiB (по умолчанию из настроек)")
    _add_json(cost_parser)

    # команда shapefind
    shapefind_parser = subparsers.add_parser(
        "shapefind",
        help="Перебор сетки форм с проверкой бюджета памяти"
    )
    shapefind_parser.add_argument("--widths", type=_int_list, required=True,
                                  help="Ширины через запятую")
    shapefind_parser.add_argument("--depths", type=_int_list, required=True,
                                  help="Глубины через запятую")
    shapefind_parser.add_argument("--heads", type=_int_list, required=True,
                                  help="Числа голов через запятую")
    shapefind_parser.add_argument("--mlps", type=_int_list, required=True,
                                  help="Ширины MLP через запятую")
    shapefind_parser.add_argument("--patch", type=int, default=14)
    shapefind_parser.add_argument("--res", type=int, default=224)
    shapefind_parser.add_argument("--batch", type=int, default=1)
    shapefind_parser.add_argument("--budget-gib", type=float,
                                  help="Бюджет памяти в GiB (по умолчанию из настроек)")
    shapefind_parser.add_argument("--fits-only", choices=OPTIMIZER_MODES,
                                  help="Показать только формы, влезающие в режиме")
    _add_json(shapefind_parser)

    # команда fit-law
    fit_parser = subparsers.add_parser(
        "fit-law",
        help="Аппроксимировать E = a (C + d)^(-b) + c по таблице прогонов"
    )
    fit_parser.add_argument("--runs", help="CSV прогонов (по умолчанию RUNS_FILE)")
    fit_parser.add_argument("--metric", required=True, help="Метрика, например INet10")
    fit_parser.add_argument("--shapes",
                            help="CSV архитектур (по умолчанию SHAPES_FILE)")
    fit_parser.add_argument("--batch", type=int, default=4096)
    fit_parser.add_argument("--space", choices=("log", "linear"), default="log")
    fit_parser.add_argument("--all-points", action="store_true",
                            help="Аппроксимировать все точки, а не только фронт")
    fit_parser.add_argument("--seed", type=int, default=0)
    fit_parser.add_argument("--out", default="fit.json", help="Путь к fit.json")
    fit_parser.add_argument("--plot", help="Кривая фронта в .svg или .csv")
    _add_json(fit_parser)

    # команда schedule
    schedule_parser = subparsers.add_parser(
        "schedule",
        help="Выгрузить расписание learning rate в CSV"
    )
    schedule_parser.add_argument("--base", type=float, required=True,
                                 help="Базовый learning rate")
    schedule_parser.add_argument("--warmup", type=int, default=0)
    schedule_parser.add_argument("--decay", choices=DECAY_TYPES, default="rsqrt")
    schedule_parser.add_argument("--timescale", type=int, default=10_000)
    schedule_parser.add_argument("--total", type=int,
                                 help="Число шагов; без него расписание бесконечное")
    schedule_parser.add_argument("--cooldown", type=int, default=0)
    schedule_parser.add_argument("--branch-at", type=int,
                                 help="Шаг начала cooldown бесконечного расписания")
    schedule_parser.add_argument("--every", type=int, default=1)
    schedule_parser.add_argument("--last", type=int,
                                 help="Последний шаг для бесконечного расписания")
    _add_json(schedule_parser)

    # команда train
    train_parser = subparsers.add_parser(
        "train",
        help="Обучить микро-ViT на синтетической задаче"
    )
    train_parser.add_argument("--config", help="JSON конфигурация обучения")
    train_parser.add_argument("--optimizer", choices=OPTIMIZER_MODES)
    train_parser.add_argument("--head", help="Тип головы: CLS, GAP или MAP")
    train_parser.add_argument("--steps", type=int, help="Число шагов")
    train_parser.add_argument("--lr", type=float, help="Базовый learning rate")
    train_parser.add_argument("--seed", type=int, help="Seed инициализации и батчей")
    _add_data_arguments(train_parser)
    train_parser.add_argument("--out", default="checkpoint.vtsk",
                              help="Путь к чекпоинту (по умолчанию checkpoint.vtsk)")
    train_parser.add_argument("--log", help="CSV журнала step,loss,lr,grad_norm")
    _add_json(train_parser)

    # команда features
    features_parser = subparsers.add_parser(
        "features",
        help="Извлечь замороженные признаки из чекпоинта"
    )
    features_parser.add_argument("--checkpoint", required=True)
    _add_data_arguments(features_parser)
    features_parser.add_argument("--out", default="features.vtsf",
                                 help="Файл признаков (по умолчанию features.vtsf)")
    _add_json(features_parser)

    # команда probe
    probe_parser = subparsers.add_parser(
        "probe",
        help="Few-shot линейная проба на файле признаков"
    )
    probe_parser.add_argument("--features", required=True, help="Файл VTSF1")
    probe_parser.add_argument("--test", help="Отдельный файл VTSF1 для оценки")
    probe_parser.add_argument("--shots", type=int, default=10)
    probe_parser.add_argument("--l2", type=float, help="Lambda (по умолчанию 1e-3 * n)")
    probe_parser.add_argument("--seed", type=int, default=0)
    probe_parser.add_argument("--bias", action="store_true", help="Столбец смещения")
    probe_parser.add_argument("--standardize", action="store_true",
                              help="Стандартизировать признаки")
    _add_json(probe_parser)

    # команда runs
    runs_parser = subparsers.add_parser(
        "runs",
        help="Проверить CSV прогонов и показать сводку"
    )
    runs_parser.add_argument("--runs", help="CSV прогонов (по умолчанию RUNS_FILE)")
    _add_json(runs_parser)

    return parser


def _emit_json(payload) -> None:
    print(json.dumps(payload, indent=2, ensure_ascii=False))


def _shape_from_args(args, res: int) -> ShapeConfig:
    if args.variant:
        base = ShapeConfig.from_variant(args.variant)
        dims = dict(width=base.width, depth=base.depth, mlp_width=base.mlp_width,
                    heads=base.heads, patch_size=base.patch_size)
    else:
        missing = [flag for flag in ("width", "depth", "mlp", "heads", "patch")
                   if getattr(args, flag) is None]
        if missing:
            raise ConfigurationError(
                "нужны --variant или все флаги: "
                + ", ".join(f"--{m}" for m in missing)
            )
        dims = dict(width=args.width, depth=args.depth, mlp_width=args.mlp,
                    heads=args.heads, patch_size=args.patch)
    overrides = {k: getattr(args, k) for k in ("width", "depth", "heads")
                 if getattr(args, k) is not None}
    if args.mlp is not None:
        overrides["mlp_width"] = args.mlp
    if args.patch is not None:
        overrides["patch_size"] = args.patch
    dims.update(overrides)
    patch = dims["patch_size"]
    # VALID-извлечение: позиционные эмбеддинги по целым патчам
    return ShapeConfig(**dims, image_res=patch * max(1, res // patch),
                       num_classes=args.classes, head_type=args.head,
                       map_mlp=args.map_mlp)


@handle_command_errors
def handle_cost(args):
    """Обработать команду cost"""
    shape = _shape_from_args(args, args.res)
    overrides = {"count_gradients": args.count_gradients}
    if args.budget_gib is not None:
        overrides["budget_bytes"] = args.budget_gib * GIB
    model = MemoryModel.from_settings(**overrides)
    modes = (args.optimizer,) if args.optimizer else OPTIMIZER_MODES
    report = cost_report(shape, res=args.res, batch=args.batch, modes=modes,
                         model=model)

    if args.json:
        _emit_json({"shape": shape.to_dict(), **report.to_dict()})
        return 0

    table = PrettyTable(["Величина", "Значение"])
    table.align = "l"
    table.add_row(["Параметры тела", f"{report.body_params / 1e6:.2f}M"])
    table.add_row(["Параметры головы", f"{report.head_params / 1e6:.3f}M"])
    table.add_row(["GFLOPs", f"{report.gflops:.1f}"])
    table.add_row(["Токены / после паддинга",
                   f"{report.tokens} / {report.padded_tokens}"])
    print(table)

    memory = PrettyTable(["Режим", "Параметры GiB", "Оптимизатор GiB",
                          "Градиенты GiB", "Активации GiB", "Итого GiB", "Влезает"])
    for mode, m in report.memory.items():
        memory.add_row([mode, *(format_number(v / GIB) for v in (
            m.params_bytes, m.optimizer_bytes, m.grad_bytes,
            m.activation_bytes, m.total_bytes)), "✓" if m.fits else "✗"])
    print(memory)
    return 0


@handle_command_errors
def handle_shapefind(args):
    """Обработать команду shapefind"""
    grid = GridSpec(args.widths, args.depths, args.heads, args.mlps, args.patch)
    budget = args.budget_gib * GIB if args.budget_gib is not None else None
    rows = shapefind(grid, res=args.res, batch=args.batch, budget_bytes=budget)
    if args.fits_only:
        rows = [r for r in rows if r.fits[args.fits_only]]

    if args.json:
        _emit_json([r.to_dict() for r in rows])
        return 0

    table = PrettyTable(["depth", "width", "mlp", "heads", "Параметры",
                         "GFLOPs", *OPTIMIZER_MODES])
    for r in rows:
        table.add_row([r.depth, r.width, r.mlp_width, r.heads,
                       f"{r.params / 1e6:.1f}M", f"{r.gflops:.1f}",
                       *("✓" if r.fits[m] else "✗" for m in OPTIMIZER_MODES)])
    print(table)
    print(f"Всего форм: {len(rows)}")
    return 0


@handle_command_errors
def handle_fit_law(args):
    """Обработать команду fit-law"""
    from vitscale.infra.plots import emit_plot
    from vitscale.infra.runs import (
        attach_compute,
        filter_metric,
        fit_to_dict,
        load_shape_table,
        parse_runs_csv,
        write_fit_json,
    )

    settings = SettingsLoader()
    table = parse_runs_csv(args.runs or settings.get("RUNS_FILE"))
    table = filter_metric(table, args.metric)
    if not len(table):
        raise ContractError(f"нет записей для метрики '{args.metric}'")
    shapes = load_shape_table(args.shapes or settings.get("SHAPES_FILE"))
    records = attach_compute(table, shapes, batch=args.batch).records

    options = FitOptions(space=args.space, frontier_only=not args.all_points,
                         seed=args.seed)
    # без фронта прогоны с одинаковым compute сводятся к лучшей ошибке
    report = fit_law(records if not args.all_points else best_per_compute(records),
                     options=options)
    frontier = pareto_frontier(records)
    write_fit_json(report, frontier, args.out)
    if args.plot:
        fitted = records if args.all_points else frontier
        emit_plot(fit_curve(report, fitted), args.plot, title=args.metric)

    if args.json:
        _emit_json(fit_to_dict(report, frontier))
        return 0

    law = report.params
    table = PrettyTable(["a", "b", "c", "d", "RMS", "RMS (c=d=0)", "Точек"])
    table.add_row([f"{law.a:.6g}", f"{law.b:.6g}", f"{law.c:.6g}", f"{law.d:.6g}",
                   f"{report.rms_residual:.4g}", f"{report.nested_rms:.4g}",
                   report.n_points])
    print(table)
    print(f"Фронт Парето: {len(frontier)} точек, результат: {args.out}")
    return 0


@handle_command_errors
def handle_schedule(args):
    """Обработать команду schedule"""
    schedule = ScheduleConfig(
        base_lr=args.base,
        warmup_steps=args.warmup,
        decay_type=args.decay,
        timescale=args.timescale,
        total_steps=args.total,
        cooldown_steps=0 if args.branch_at is not None else args.cooldown,
    )
    if args.branch_at is not None:
        schedule = cooldown_branch(schedule, args.branch_at, args.cooldown)
    rows = list(dump_schedule(schedule, every=args.every, last=args.last))

    if args.json:
        _emit_json([{"step": step, "lr": lr} for step, lr in rows])
        return 0

    print("step,lr")
    for step, lr in rows:
        print(f"{step},{lr!r}")
    return 0


def _load_data(args, shape: ShapeConfig):
    """Синтетика по форме модели либо пара IDX файлов"""
    from vitscale.infra.checkpoints import load_idx_images, load_idx_labels
    from vitscale.training.config import SyntheticSpec
    from vitscale.training.synthetic import gen_synthetic

    if args.idx_images or args.idx_labels:
        if not (args.idx_images and args.idx_labels):
            raise ConfigurationError("--idx-images и --idx-labels задаются вместе")
        return load_idx_images(args.idx_images), load_idx_labels(args.idx_labels)
    spec = SyntheticSpec(res=shape.image_res, classes=shape.num_classes,
                         n_per_class=args.n_per_class, noise=args.noise,
                         seed=args.data_seed, channels=shape.channels,
                         template_gap=args.gap)
    return gen_synthetic(spec)


@handle_command_errors
def handle_train(args):
    """Обработать команду train"""
    from dataclasses import replace

    from vitscale.infra.checkpoints import save_checkpoint
    from vitscale.training.config import (
        MICRO_SHAPE,
        TrainConfig,
        load_train_file,
    )
    from vitscale.training.synthetic import gen_synthetic
    from vitscale.training.trainer import accuracy, train

    spec = None
    if args.config:
        config, spec = load_train_file(args.config)
    else:
        steps = args.steps if args.steps is not None else 2000
        warmup = min(100, steps)
        config = TrainConfig(
            shape=ShapeConfig(**MICRO_SHAPE),
            schedule=ScheduleConfig(
                base_lr=args.lr or 3e-3, warmup_steps=warmup, decay_type="rsqrt",
                timescale=200, total_steps=steps,
                cooldown_steps=min(200, steps - warmup),
            ),
            total_steps=steps,
        )

    changes = {}
    if args.optimizer:
        changes["optimizer"] = args.optimizer
    if args.head:
        changes["shape"] = config.shape.with_(head_type=args.head)
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.config and (args.steps is not None or args.lr is not None):
        total = args.steps if args.steps is not None else config.total_steps
        changes["total_steps"] = total
        changes["schedule"] = replace(config.schedule, total_steps=total,
                                      base_lr=args.lr or config.schedule.base_lr)
    if changes:
        config = replace(config, **changes)

    if spec is not None and not (args.idx_images or args.idx_labels):
        images, labels = gen_synthetic(spec)
    else:
        images, labels = _load_data(args, config.shape)

    params, log = train(config, images, labels)
    save_checkpoint(params, config.shape, args.out)
    if args.log:
        log.to_csv(args.log)
    train_acc = accuracy(params, images, labels, config.shape)

    result = {
        "steps": config.total_steps,
        "final_loss": log.final_loss,
        "train_accuracy": train_acc,
        "clipped_steps": len(log.clipped_steps),
        "checkpoint": str(args.out),
    }
    if args.json:
        _emit_json(result)
        return 0

    table = PrettyTable(["Величина", "Значение"])
    table.align = "l"
    for key, value in result.items():
        table.add_row([key, value])
    print(table)
    return 0


@handle_command_errors
def handle_features(args):
    """Обработать команду features"""
    from vitscale.infra.checkpoints import load_checkpoint, save_features
    from vitscale.training.trainer import extract_features

    params, shape = load_checkpoint(args.checkpoint)
    images, labels = _load_data(args, shape)
    features = extract_features(params, images, shape, labels=labels)
    save_features(features, args.out)

    result = {"n": features.n, "dim": features.dim,
              "classes": features.class_count, "path": str(args.out)}
    if args.json:
        _emit_json(result)
        return 0
    print(f"✓ Признаки сохранены: {args.out} (n={features.n}, dim={features.dim})")
    return 0


@handle_command_errors
def handle_probe(args):
    """Обработать команду probe"""
    from vitscale.infra.checkpoints import load_features

    features = load_features(args.features)
    if args.test:
        test = load_features(args.test, class_count=features.class_count)
        train_set = kshot_sample(features, args.shots, seed=args.seed)
    else:
        train_set, test = kshot_split(features, args.shots, seed=args.seed)
    probe = fit_probe(train_set, l2=args.l2, fit_bias=args.bias,
                      standardize=args.standardize)
    acc = evaluate_probe(probe, test)

    result = {"shots": args.shots, "seed": args.seed, "train_n": train_set.n,
              "test_n": test.n, "accuracy": acc}
    if args.json:
        _emit_json(result)
        return 0
    print(f"{args.shots}-shot точность: {100 * acc:.2f}% "
          f"(обучение {train_set.n}, тест {test.n})")
    return 0


@handle_command_errors
def handle_runs(args):
    """Обработать команду runs"""
    from vitscale.infra.runs import BUNDLED_CHECKSUMS, parse_runs_csv

    path = args.runs or SettingsLoader().get("RUNS_FILE")
    table = parse_runs_csv(path)
    known = {v: k for k, v in BUNDLED_CHECKSUMS.items()}
    per_metric = {m: sum(1 for r in table if r.metric == m) for m in table.metrics()}
    result = {
        "path": str(path),
        "rows": len(table),
        "checksum": table.checksum,
        "bundled": known.get(table.checksum),
        "models": table.models(),
        "metrics": per_metric,
    }
    if args.json:
        _emit_json(result)
        return 0

    print(f"Файл: {path}")
    print(f"Записей: {len(table)}, моделей: {len(result['models'])}")
    print(f"sha256: {table.checksum}"
          + (f" (совпадает с {result['bundled']})" if result["bundled"] else ""))
    metrics = PrettyTable(["Метрика", "Записей", "Лучшая точность"])
    for metric, count in per_metric.items():
        best = max(r.accuracy for r in table if r.metric == metric)
        metrics.add_row([metric, count, f"{best:.1f}"])
    print(metrics)
    return 0


HANDLERS = {
    "cost": handle_cost,
    "shapefind": handle_shapefind,
    "fit-law": handle_fit_law,
    "schedule": handle_schedule,
    "train": handle_train,
    "features": handle_features,
    "probe": handle_probe,
    "runs": handle_runs,
}


def run(argv: Optional[Sequence[str]] = None) -> int:
    """Точка входа: 0 успех, 1 ошибка использования, 2 ошибка данных"""
    from vitscale.logging_config import get_logger
    get_logger()

    parser = create_parser()
    argv = sys.argv[1:] if argv is None else list(argv)

    # если нет аргументов - показываем help
    if not argv:
        parser.print_help()
        return 0

    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        # argparse вызывает sys.exit() при ошибке парсинга
        return 0 if e.code in (0, None) else 1

    handler = HANDLERS.get(args.command)
    if handler is None:
        parser.print_usage(sys.stderr)
        return 1
    return handler(args)


if __name__ == "__main__":
    sys.exit(run())
