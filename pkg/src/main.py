"""
SFE Lab - Command Line Entry Point
==================================

Subcommands run one stage on explicit files, or the whole cached pipeline:

    train-target   train CNN1/CNN2 on MNIST                 -> classifier checkpoint
    attack         craft adversarial examples                 -> pairs file
    train-sfe      train the coupled generators (PG/NG + D)   -> SFE checkpoint
    train-advd     train the adversarial example detector     -> AdvD checkpoint
    detect         score pairs with AdvD (optional ROC sweep)  -> report
    defend         re-identify adversarial examples with PG    -> report
    evaluate       every metric for one or more pairs files     -> report
    transfer       cross-attack DR / DSR matrix                 -> JSON
    run            the full pipeline with stage caching

Usage:
    python src/main.py --config config.ini run
    python src/main.py train-target --out runs/cnn1.sfel
    python src/main.py attack --model runs/cnn1.sfel --method bim --out runs/bim.sfel
    python src/main.py detect --model runs/cnn1.sfel --sfe runs/sfe.sfel --advd runs/advd.sfel \\
        --pairs runs/bim.sfel --threshold 0.5 --report runs/detect.csv

Exit codes: 0 success, 1 experiment error (bad config, bad file, failed
stage), 2 unexpected error.
"""

import sys
import argparse
import json
import logging
import time
from dataclasses import asdict
from pathlib import Path

# Add src directory to path for imports
sys.path.insert(0, str(Path(__file__).parent))

from attacks import ATTACK_NAMES, run_attack
from classifier import MODEL_NAMES, TAPS, accuracy, build_cnn, load_classifier, save_classifier, train_classifier
from config import config_hash, log_config, parse_config, require_data_dir
from detector import detect, load_detector, save_detector
from errors import SfeLabError
from evaluation import (EvalReport, defense_success_rate, evaluate_detection, evaluate_pairs, mixed_detection_set,
                        roc_sweep, transfer_matrix)
from mnist_loader import load_mnist
from pairs import load_pairs, save_pairs
from pipeline import BANNER, Pipeline, attack_spec, derived_seed, fit_detector, fit_sfe, split_pairs
from saver import export_features, export_report
from sfe import DISCRIMINATOR_HEADS, GENERATOR_DEPTHS, load_sfe, save_sfe

logger = logging.getLogger(__name__)

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'


def setup_logging(level: str, out_dir: Path):
    out_dir.mkdir(parents=True, exist_ok=True)
    logging.basicConfig(
        level=getattr(logging, level.upper()),
        format=LOG_FORMAT,
        handlers=[
            logging.FileHandler(out_dir / 'sfe_lab.log'),
            logging.StreamHandler()
        ],
        force=True,
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog='sfe-lab',
        description='Adversarial example detection and re-identification with a salient feature extractor',
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  %(prog)s run                                   # full pipeline with defaults
  %(prog)s --config config.ini --seed 3 run      # another seed, cached per stage
  %(prog)s attack --model m.sfel --method pgd --out pgd.sfel
        """
    )
    parser.add_argument('--config', help='config.ini to read (default: built-in defaults)')
    parser.add_argument('--seed', type=int, help='global seed ([run] seed)')
    parser.add_argument('--out-dir', help='artifact directory ([run] out_dir)')
    parser.add_argument('--threads', type=int, help='attack worker threads ([run] threads)')
    parser.add_argument('--data-dir', help='MNIST directory (else $SFE_LAB_DATA, else [data] dir)')
    parser.add_argument('--log-level', choices=['DEBUG', 'INFO', 'WARNING', 'ERROR'])
    parser.add_argument('--no-progress', action='store_true', help='disable progress bars')

    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('train-target', help='train the targeted classifier')
    p.add_argument('--model', dest='model_name', choices=MODEL_NAMES)
    p.add_argument('--tap', choices=TAPS)
    p.add_argument('--epochs', type=int)
    p.add_argument('--batch-size', type=int)
    p.add_argument('--out', required=True)

    p = sub.add_parser('attack', help='craft adversarial example pairs')
    p.add_argument('--model', required=True, help='classifier checkpoint')
    p.add_argument('--method', choices=ATTACK_NAMES)
    p.add_argument('--eps', type=float)
    p.add_argument('--step', type=float)
    p.add_argument('--iters', type=int)
    p.add_argument('--decay', type=float)
    p.add_argument('--limit', type=int, help='number of test images to attack')
    p.add_argument('--out', required=True)

    p = sub.add_parser('train-sfe', help='train the salient feature extractor')
    p.add_argument('--pairs', required=True)
    p.add_argument('--model', required=True, help='classifier checkpoint')
    p.add_argument('--kd', type=int)
    p.add_argument('--mb', type=int)
    p.add_argument('--iters', type=int)
    p.add_argument('--generator-depth', choices=tuple(GENERATOR_DEPTHS))
    p.add_argument('--discriminator-head', choices=DISCRIMINATOR_HEADS)
    p.add_argument('--out', required=True)

    p = sub.add_parser('train-advd', help='train the adversarial example detector')
    p.add_argument('--sfe', required=True)
    p.add_argument('--pairs', required=True)
    p.add_argument('--model', required=True, help='classifier checkpoint')
    p.add_argument('--epochs', type=int)
    p.add_argument('--out', required=True)

    p = sub.add_parser('detect', help='detection rate on held-out pairs')
    _add_defence_inputs(p, advd=True)
    p.add_argument('--pairs', required=True)
    p.add_argument('--threshold', type=float)
    p.add_argument('--roc', help='comma-separated thresholds for a sweep, e.g. 0.1,0.3,0.5,0.7,0.9')
    p.add_argument('--report', required=True)

    p = sub.add_parser('defend', help='defence success rate on held-out pairs')
    _add_defence_inputs(p, advd=False)
    p.add_argument('--pairs', required=True)
    p.add_argument('--features', help='also export raw/SF/TF features to this container')
    p.add_argument('--report', required=True)

    p = sub.add_parser('evaluate', help='full metric report for one or more pairs files')
    _add_defence_inputs(p, advd=True)
    p.add_argument('--pairs', required=True, nargs='+')
    p.add_argument('--threshold', type=float)
    p.add_argument('--out', required=True, help='report.csv or report.json')

    p = sub.add_parser('transfer', help='cross-attack detection/defence matrix')
    p.add_argument('--model', required=True, help='classifier checkpoint')
    p.add_argument('--defence', required=True, nargs='+', metavar='ATTACK=SFE,ADVD',
                   help='defence trained on ATTACK, e.g. bim=runs/sfe.sfel,runs/advd.sfel')
    p.add_argument('--pairs', required=True, nargs='+')
    p.add_argument('--out', required=True)

    p = sub.add_parser('run', help='full cached pipeline')
    p.add_argument('--no-transfer', action='store_true')

    return parser


def _add_defence_inputs(p: argparse.ArgumentParser, advd: bool):
    p.add_argument('--model', required=True, help='classifier checkpoint')
    p.add_argument('--sfe', required=True)
    if advd:
        p.add_argument('--advd', required=True)


def overrides_from_args(args: argparse.Namespace) -> dict:
    """Flags that map onto config keys; None means "not given"."""
    get = lambda name: getattr(args, name, None)
    return {
        'run.seed': args.seed,
        'run.out_dir': args.out_dir,
        'run.threads': args.threads,
        'data.dir': args.data_dir,
        'logging.level': args.log_level,
        'model.name': get('model_name'),
        'model.tap': get('tap'),
        'model.epochs': get('epochs') if args.command == 'train-target' else None,
        'model.batch_size': get('batch_size'),
        'attack.method': get('method'),
        'attack.eps': get('eps'),
        'attack.step': get('step'),
        'attack.iters': get('iters') if args.command == 'attack' else None,
        'attack.decay': get('decay'),
        'attack.limit': get('limit'),
        'sfe.k_d': get('kd'),
        'sfe.m_b': get('mb'),
        'sfe.iterations': get('iters') if args.command == 'train-sfe' else None,
        'sfe.generator_depth': get('generator_depth'),
        'sfe.discriminator_head': get('discriminator_head'),
        'detector.epochs': get('epochs') if args.command == 'train-advd' else None,
        'detector.threshold': get('threshold'),
    }


# ----------------------------------------------------------------- commands

def cmd_train_target(config, args, progress: bool) -> int:
    train, test = load_mnist(require_data_dir(config), config.data.train_limit, config.data.test_limit)
    clf = build_cnn(config.model.name, config.model.tap, seed=derived_seed(config.run.seed, 'train-target'))
    log = train_classifier(clf, train, config.model.epochs, config.model.batch_size,
                           seed=derived_seed(config.run.seed, 'train-target', 1), test=test, progress=progress)
    save_classifier(args.out, clf, {'epochs': log.epochs, 'test_acc': accuracy(clf, test)})
    return 0


def cmd_attack(config, args, progress: bool) -> int:
    _, test = load_mnist(require_data_dir(config), config.data.train_limit, config.data.test_limit)
    clf = load_classifier(args.model)
    method = config.attack.method
    spec = attack_spec(config, method, derived_seed(config.run.seed, 'attack', ATTACK_NAMES.index(method)))
    pairs = run_attack(clf, test.head(config.attack.limit), spec, config.run.threads, progress)
    save_pairs(pairs, args.out)
    return 0


def cmd_train_sfe(config, args, progress: bool) -> int:
    clf = load_classifier(args.model)
    train_pairs, _ = split_pairs(config, load_pairs(args.pairs))
    sfe, seconds = fit_sfe(config, clf, train_pairs, derived_seed(config.run.seed, 'train-sfe'), progress)
    save_sfe(args.out, sfe, {'train_s': seconds, 'attack': train_pairs.attack_name})
    return 0


def cmd_train_advd(config, args, progress: bool) -> int:
    clf = load_classifier(args.model)
    sfe = load_sfe(args.sfe)
    train_pairs, _ = split_pairs(config, load_pairs(args.pairs))
    det, seconds = fit_detector(config, clf, sfe, train_pairs, derived_seed(config.run.seed, 'train-advd'),
                                progress)
    save_detector(args.out, det, {'train_s': seconds, 'attack': train_pairs.attack_name})
    return 0


def cmd_detect(config, args, progress: bool) -> int:
    clf = load_classifier(args.model)
    sfe = load_sfe(args.sfe)
    det = load_detector(args.advd)
    _, pairs = split_pairs(config, load_pairs(args.pairs))
    start = time.perf_counter()
    dr = evaluate_detection(det, sfe, clf, pairs, config.detector.threshold)
    report = EvalReport(experiment_id=config_hash(config), model=clf.arch, attack=pairs.attack_name,
                        eps=pairs.attack_params.get('epsilon'), dr=dr, test_s=time.perf_counter() - start,
                        seed=config.run.seed, config=config.to_dict())
    if args.roc:
        images, truth = mixed_detection_set(pairs)
        thresholds = [float(t) for t in args.roc.split(',') if t.strip()]
        points = roc_sweep(detect(det, sfe, clf, images).scores, truth, thresholds)
        report.extra['roc'] = [asdict(p) for p in points]
        for p in points:
            logger.info(f"  tau={p.threshold:.3f}  DR={p.dr}  TPR={p.tpr}  FPR={p.fpr}")
    export_report(report, args.report)
    logger.info(f"✓ Detection rate ({pairs.attack_name}): {dr}")
    return 0


def cmd_defend(config, args, progress: bool) -> int:
    clf = load_classifier(args.model)
    sfe = load_sfe(args.sfe)
    _, pairs = split_pairs(config, load_pairs(args.pairs))
    start = time.perf_counter()
    dsr = defense_success_rate(clf, sfe, pairs)
    report = EvalReport(experiment_id=config_hash(config), model=clf.arch, attack=pairs.attack_name,
                        eps=pairs.attack_params.get('epsilon'), dsr=dsr, test_s=time.perf_counter() - start,
                        seed=config.run.seed, config=config.to_dict())
    export_report(report, args.report)
    if args.features:
        export_features(clf, sfe, pairs, args.features)
    logger.info(f"✓ Defence success rate ({pairs.attack_name}): {dsr}")
    return 0


def cmd_evaluate(config, args, progress: bool) -> int:
    clf = load_classifier(args.model)
    sfe = load_sfe(args.sfe)
    det = load_detector(args.advd)
    experiment = config_hash(config)
    reports = []
    for path in args.pairs:
        _, pairs = split_pairs(config, load_pairs(path))
        reports.append(evaluate_pairs(clf, sfe, det, pairs, f"{experiment}-{pairs.attack_name}", clf.arch,
                                      threshold=config.detector.threshold, seed=config.run.seed,
                                      config=config.to_dict()))
    suffix = Path(args.out).suffix.lstrip('.')
    export_report(reports, args.out, suffix if suffix in ('csv', 'json') else config.evaluation.report_format)
    return 0


def cmd_transfer(config, args, progress: bool) -> int:
    clf = load_classifier(args.model)
    defences = {}
    for entry in args.defence:
        attack, _, files = entry.partition('=')
        sfe_path, _, advd_path = files.partition(',')
        if not attack or not sfe_path or not advd_path:
            raise SfeLabError(f"--defence '{entry}' must look like ATTACK=SFE,ADVD")
        defences[attack] = (load_sfe(sfe_path), load_detector(advd_path))
    tests = {}
    for path in args.pairs:
        _, pairs = split_pairs(config, load_pairs(path))
        tests[pairs.attack_name] = pairs
    cells = transfer_matrix(clf, defences, tests)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, 'w', encoding='utf-8') as f:
        json.dump({'cells': [asdict(c) for c in cells]}, f, indent=2, sort_keys=True)
    for c in cells:
        logger.info(f"  {c.train_attack:>9} -> {c.test_attack:<9} DR={c.dr}  DSR={c.dsr}"
                    f"{'  (flagged)' if c.flagged else ''}")
    logger.info(f"✓ Saved transfer matrix to {out}")
    return 0


def cmd_run(config, args, progress: bool) -> int:
    pipeline = Pipeline(config, progress)
    artifacts = pipeline.run(with_transfer=not args.no_transfer)
    logger.info(f"✓ Report: {artifacts['report']}")
    return 0


COMMANDS = {
    'train-target': cmd_train_target,
    'attack': cmd_attack,
    'train-sfe': cmd_train_sfe,
    'train-advd': cmd_train_advd,
    'detect': cmd_detect,
    'defend': cmd_defend,
    'evaluate': cmd_evaluate,
    'transfer': cmd_transfer,
    'run': cmd_run,
}


def main(argv=None) -> int:
    """
    Parse arguments, resolve the config, dispatch the subcommand.

    Returns:
        0 on success, 1 on SfeLabError (and missing files), 2 on anything else
    """
    args = build_parser().parse_args(argv)

    try:
        config = parse_config(args.config, overrides_from_args(args))
    except (SfeLabError, FileNotFoundError) as e:
        logging.basicConfig(level=logging.INFO, format=LOG_FORMAT)
        logger.error(f"✗ Configuration error: {e}")
        return 1

    setup_logging(config.logging.level, Path(config.run.out_dir))

    logger.info(BANNER)
    logger.info(f"SFE Lab - {args.command}")
    logger.info(BANNER)
    log_config(config)

    try:
        return COMMANDS[args.command](config, args, not args.no_progress)
    except (SfeLabError, FileNotFoundError) as e:
        logger.error(f"✗ {args.command} failed: {e}")
        return 1
    except Exception as e:
        logger.error(f"✗ Unexpected error in {args.command}: {e}")
        logger.exception("Full error traceback:")
        return 2
    finally:
        logger.info(BANNER)
        logger.info(f"SFE Lab - {args.command} finished")
        logger.info(BANNER)


if __name__ == '__main__':
    sys.exit(main())
