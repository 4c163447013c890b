"""
Command-line entry point.

    python main.py synth    --out DIR [--tiny] [--config F]
    python main.py train    --manifest M --out DIR [--pretrain-only] [--tiny]
    python main.py infer    --checkpoint C --manifest M --out DIR [--split test]
    python main.py filter   --detections DIR --manifest M --out DIR [--oracle-prior]
    python main.py eval     --pred DIR --manifest M --out DIR [--export-fiber-maps]
    python main.py froc     --prob DIR --manifest M --out DIR [--filtered --oracle-prior]
    python main.py ablate   --manifest M --out DIR [--variants ce focal ...]
    python main.py crossval --manifest M --out DIR [--folds 5]

Exit codes: 0 success, 2 usage errors (bad flags, missing inputs, invalid
manifests or configs), 1 runtime errors.
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence

from core import __version__
from core.config import (
    RunConfig,
    build_run_config,
    config_from_dict,
    config_to_dict,
    load_config_file,
    write_run_manifest,
)
from core.dataset_io import resolve_manifest_path
from core.errors import ConfigError, FiberDetectError, ManifestError
from core.settings import default_device, seed_everything, setup_logging
from flows.continuity_flow import ContinuityConfig, ContinuityFlow
from flows.evaluation_flow import (
    ABLATION_VARIANTS,
    EvaluationFlow,
    FrocFlow,
    ablation_harness,
    cross_validate,
)
from flows.inference_flow import InferenceFlow
from flows.training_flow import TrainConfig, TrainingFlow
from tools.metrics import MatchConfig
from tools.synth_generator import SYNTH_PAIR_OFFSET_UM, SynthConfig, apply_splits, generate_stack, write_dataset

logger = logging.getLogger(__name__)

USAGE_ERROR = 2
RUNTIME_ERROR = 1

# Desk-scale presets for smoke runs
TINY_OVERRIDES: Dict[str, Dict[str, Any]] = {
    'synth': {
        'n_sections': 8,
        'image_size': [512, 512],
        'n_dense_bundles': [1, 1],
        'n_moderate_bundles': [1, 1],
        'n_labeled': 3,
        'n_heldout': 2,
    },
    'train': {
        'batch_size': 2,
        'pretrain_epochs': 2,
        'te_epochs': 2,
        'patience': 2,
        'steps_per_epoch': 2,
        'patch_size': 128,
        'unet': {'base_width': 8},
        'tile': {'tile_size': 512},
        'pair': {'max_crop_offset_um': SYNTH_PAIR_OFFSET_UM},
    },
    'continuity': {'prior': {'epochs': 1, 'base_width': 8}},
}

PATH_FLAGS = ('config', 'manifest', 'checkpoint', 'pred', 'detections', 'prob', 'prior_checkpoint')


def default_sections() -> Dict[str, Dict[str, Any]]:
    return {
        'synth': config_to_dict(SynthConfig()),
        'train': config_to_dict(TrainConfig()),
        'continuity': config_to_dict(ContinuityConfig()),
        'match': config_to_dict(MatchConfig()),
    }


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='fiberdetect', description='Fiber bundle detection toolkit')
    parser.add_argument('--version', action='version', version=f'%(prog)s {__version__}')
    sub = parser.add_subparsers(dest='command', required=True)

    def add(name: str, help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument('--out', required=True, type=Path, help='output directory')
        p.add_argument('--config', type=Path, help='JSON run configuration (see docs/run_config.schema.json)')
        p.add_argument('--seed', type=int, help='seed for every random generator')
        p.add_argument('--log-level', help='DEBUG, INFO, WARNING or ERROR')
        p.add_argument('--jobs', type=int, default=1, help='parallel workers where supported')
        return p

    def add_prior_flags(p: argparse.ArgumentParser) -> None:
        p.add_argument('--oracle-prior', action='store_true', help='use dilated ground-truth dense bundles as prior')
        p.add_argument('--prior-checkpoint', type=Path, help='trained prior network')
        p.add_argument('--train-prior', action='store_true', help='train the prior network before filtering')

    p = add('synth', 'Generate a synthetic section stack')
    p.add_argument('--n-sections', type=int)
    p.add_argument('--tiny', action='store_true', help='small desk-scale stack')

    p = add('train', 'Pretrain and run temporal ensembling')
    p.add_argument('--manifest', required=True, type=Path)
    p.add_argument('--pretrain-only', action='store_true')
    p.add_argument('--pretrain-epochs', type=int)
    p.add_argument('--te-epochs', type=int)
    p.add_argument('--pair-offset-um', type=float, help='largest positive-pair crop offset in micrometres')
    p.add_argument('--tiny', action='store_true', help='desk-scale network and epochs')

    p = add('infer', 'Predict probability maps and regions for whole sections')
    p.add_argument('--checkpoint', required=True, type=Path)
    p.add_argument('--manifest', required=True, type=Path)
    p.add_argument('--split', default='test', help="manifest split to predict, or 'all'")
    p.add_argument('--threshold', type=float)
    p.add_argument('--tile-size', type=int)

    p = add('filter', 'Apply the continuity filter and postprocessing to detections')
    p.add_argument('--detections', required=True, type=Path)
    p.add_argument('--manifest', required=True, type=Path)
    p.add_argument('--distance-mode', choices=('min_pixel', 'centroid'))
    add_prior_flags(p)

    p = add('eval', 'Score detections against the charting')
    p.add_argument('--pred', required=True, type=Path)
    p.add_argument('--manifest', required=True, type=Path)
    p.add_argument('--prob', type=Path, help='probability maps for FROC samples in the report')
    p.add_argument('--split', default='test', help="manifest split to evaluate, or 'all'")
    p.add_argument('--match-rule', choices=('any_overlap', 'iou_threshold'))
    p.add_argument('--iou-min', type=float)
    p.add_argument('--export-fiber-maps', action='store_true')

    p = add('froc', 'FROC curve over stored probability maps')
    p.add_argument('--prob', required=True, type=Path)
    p.add_argument('--manifest', required=True, type=Path)
    p.add_argument('--split', default='test', help="manifest split to evaluate, or 'all'")
    p.add_argument('--thresholds', type=float, nargs='+')
    p.add_argument('--filtered', action='store_true', help='apply continuity filter and postprocessing')
    p.add_argument('--match-rule', choices=('any_overlap', 'iou_threshold'))
    add_prior_flags(p)

    p = add('ablate', 'Train and evaluate the loss/training ablation variants')
    p.add_argument('--manifest', required=True, type=Path)
    p.add_argument('--pair-offset-um', type=float)
    p.add_argument('--variants', nargs='+', choices=ABLATION_VARIANTS, default=list(ABLATION_VARIANTS))
    p.add_argument('--tiny', action='store_true')
    add_prior_flags(p)

    p = add('crossval', 'k-fold cross-validation over the charted sections')
    p.add_argument('--manifest', required=True, type=Path)
    p.add_argument('--pair-offset-um', type=float)
    p.add_argument('--folds', type=int, default=5)
    p.add_argument('--tiny', action='store_true')
    add_prior_flags(p)
    return parser


def cli_overrides(args: argparse.Namespace) -> Dict[str, Any]:
    """Configuration values set explicitly on the command line."""
    overrides: Dict[str, Any] = {'sections': {}, 'out_dir': str(args.out)}
    if args.seed is not None:
        overrides['seed'] = args.seed
    sections = overrides['sections']
    if getattr(args, 'tiny', False):
        for name, values in TINY_OVERRIDES.items():
            sections[name] = dict(values)

    def put(section: str, key: str, value: Any) -> None:
        if value is not None:
            sections.setdefault(section, {})[key] = value

    put('synth', 'n_sections', getattr(args, 'n_sections', None))
    put('train', 'pretrain_epochs', getattr(args, 'pretrain_epochs', None))
    put('train', 'te_epochs', getattr(args, 'te_epochs', None))
    if getattr(args, 'te_epochs', None) is not None:
        patience = sections['train'].get('patience', TrainConfig().patience)
        put('train', 'patience', min(patience, args.te_epochs))
    if getattr(args, 'pair_offset_um', None) is not None:
        sections.setdefault('train', {})['pair'] = {'max_crop_offset_um': args.pair_offset_um}
    put('continuity', 'distance_mode', getattr(args, 'distance_mode', None))
    put('match', 'match_rule', getattr(args, 'match_rule', None))
    put('match', 'iou_min', getattr(args, 'iou_min', None))
    if getattr(args, 'threshold', None) is not None or getattr(args, 'tile_size', None) is not None:
        tile = {}
        if args.threshold is not None:
            tile['threshold'] = args.threshold
        if args.tile_size is not None:
            tile['tile_size'] = args.tile_size
        sections.setdefault('train', {})['tile'] = tile
    if args.seed is not None:
        put('synth', 'seed', args.seed)
    return overrides


def missing_inputs(args: argparse.Namespace) -> List[str]:
    problems = []
    for name in PATH_FLAGS:
        value = getattr(args, name, None)
        if value is not None and name == 'manifest':
            value = resolve_manifest_path(value)
        if value is not None and not Path(value).exists():
            problems.append(f"--{name.replace('_', '-')}: path not found: {value}")
    return problems


def _split(value: Optional[str]) -> Optional[str]:
    return None if value in (None, 'all') else value


def _continuity_flow(args: argparse.Namespace, ccfg: ContinuityConfig, out_dir: Path, seed: int) -> Optional[ContinuityFlow]:
    if not (args.oracle_prior or args.prior_checkpoint or args.train_prior):
        return None
    return ContinuityFlow(ccfg, out_dir, oracle=args.oracle_prior, prior_checkpoint=args.prior_checkpoint,
                          train_prior_model=args.train_prior, seed=seed, device=default_device())


def cmd_synth(args, run_config: RunConfig) -> int:
    cfg = config_from_dict(SynthConfig, run_config.section('synth'))
    print(f"🧪 Generating {cfg.n_sections} synthetic sections ({cfg.image_size[0]}x{cfg.image_size[1]})...")
    sections = apply_splits(generate_stack(cfg, jobs=args.jobs), cfg)
    manifest = write_dataset(sections, args.out)
    print(f"✅ Dataset written: {manifest}")
    return 0


def cmd_train(args, run_config: RunConfig) -> int:
    cfg = config_from_dict(TrainConfig, run_config.section('train'))
    flow = TrainingFlow(cfg, args.out, run_config.seed, default_device())
    print("🔄 Training...")
    result = flow.run(args.manifest, pretrain_only=args.pretrain_only)
    print(f"✅ Training finished after {result['epochs']} epochs")
    for tag, path in result['checkpoints'].items():
        print(f"💾 {tag}: {path}")
    return 0


def cmd_infer(args, run_config: RunConfig) -> int:
    cfg = config_from_dict(TrainConfig, run_config.section('train'))
    flow = InferenceFlow(args.checkpoint, args.out, cfg.tile, default_device())
    result = flow.run(args.manifest, split=_split(args.split))
    print(f"✅ Predicted {len(result['sections'])} sections into {args.out}")
    return 0


def cmd_filter(args, run_config: RunConfig) -> int:
    ccfg = config_from_dict(ContinuityConfig, run_config.section('continuity'))
    flow = ContinuityFlow(ccfg, args.out, oracle=args.oracle_prior, prior_checkpoint=args.prior_checkpoint,
                          train_prior_model=args.train_prior, seed=run_config.seed, device=default_device())
    result = flow.run(args.detections, args.manifest)
    print(f"✅ Continuity filter removed {result['removed']} regions over {len(result['sections'])} sections")
    return 0


def cmd_eval(args, run_config: RunConfig) -> int:
    mc = config_from_dict(MatchConfig, run_config.section('match'))
    flow = EvaluationFlow(args.out, mc, export_maps=args.export_fiber_maps, prob_dir=args.prob)
    report = flow.run(args.pred, args.manifest, split=_split(args.split))
    print("📊 Results:")
    print(f"   TPR dense:    {report.tpr_dense}")
    print(f"   TPR moderate: {report.tpr_moderate}")
    print(f"   FP_avg:       {report.fp_avg:.2f}")
    print(f"✅ Report written to {Path(args.out) / 'metrics.json'}")
    return 0


def cmd_froc(args, run_config: RunConfig) -> int:
    mc = config_from_dict(MatchConfig, run_config.section('match'))
    ccfg = config_from_dict(ContinuityConfig, run_config.section('continuity'))
    continuity = _continuity_flow(args, ccfg, args.out, run_config.seed) if args.filtered else None
    if args.filtered and continuity is None:
        print("❌ --filtered needs --oracle-prior, --prior-checkpoint or --train-prior")
        return USAGE_ERROR
    kwargs = {'thresholds': args.thresholds} if args.thresholds else {}
    result = FrocFlow(args.out, mc, continuity=continuity, **kwargs).run(args.prob, args.manifest, _split(args.split))
    knee = result['elbow']
    print(f"📊 Elbow at threshold {knee.threshold:.2f}: TPR {knee.tpr:.3f}, {knee.fp_per_section:.2f} FP/section")
    return 0


def cmd_ablate(args, run_config: RunConfig) -> int:
    cfg = config_from_dict(TrainConfig, run_config.section('train'))
    ccfg = config_from_dict(ContinuityConfig, run_config.section('continuity'))
    mc = config_from_dict(MatchConfig, run_config.section('match'))
    table = ablation_harness(args.manifest, args.variants, cfg, args.out, run_config.seed, ccfg,
                             _continuity_flow(args, ccfg, args.out, run_config.seed), mc, default_device())
    print("📊 Ablation:")
    print(table.to_string(float_format=lambda v: f'{v:.3f}'))
    return 0


def cmd_crossval(args, run_config: RunConfig) -> int:
    cfg = config_from_dict(TrainConfig, run_config.section('train'))
    ccfg = config_from_dict(ContinuityConfig, run_config.section('continuity'))
    mc = config_from_dict(MatchConfig, run_config.section('match'))
    _, aggregate = cross_validate(args.manifest, args.folds, cfg, out_dir=args.out, seed=run_config.seed,
                                  ccfg=ccfg, continuity=_continuity_flow(args, ccfg, args.out, run_config.seed),
                                  mc=mc, device=default_device())
    print("📊 Cross-validation (mean ± std):")
    for metric, row in aggregate.iterrows():
        print(f"   {metric}: {row['mean']:.3f} ± {row['std']:.3f}")
    return 0


COMMANDS: Dict[str, Callable[[argparse.Namespace, RunConfig], int]] = {
    'synth': cmd_synth,
    'train': cmd_train,
    'infer': cmd_infer,
    'filter': cmd_filter,
    'eval': cmd_eval,
    'froc': cmd_froc,
    'ablate': cmd_ablate,
    'crossval': cmd_crossval,
}


def run(argv: Optional[Sequence[str]] = None) -> int:
    """Parse ``argv``, run one subcommand and return its exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    problems = missing_inputs(args)
    if problems:
        for problem in problems:
            print(f"❌ {problem}", file=sys.stderr)
        return USAGE_ERROR

    setup_logging(args.out, args.log_level)
    try:
        run_config = build_run_config(
            {'seed': 0, 'out_dir': str(args.out), 'sections': default_sections()},
            load_config_file(args.config),
            cli_overrides(args),
        )
        seed_everything(run_config.seed)
        inputs = [resolve_manifest_path(getattr(args, name)) if name == 'manifest' else getattr(args, name)
                  for name in PATH_FLAGS if getattr(args, name, None) is not None]
        write_run_manifest(args.out, run_config, ' '.join(['fiberdetect'] + list(argv or sys.argv[1:])), inputs)
        return COMMANDS[args.command](args, run_config)
    except ManifestError as e:
        print(f"❌ Invalid input: {e}", file=sys.stderr)
        logger.error(f"Usage error: {e}")
        return USAGE_ERROR
    except ConfigError as e:
        print(f"❌ Invalid configuration: {e}", file=sys.stderr)
        logger.error(f"Usage error: {e}")
        return USAGE_ERROR
    except (FiberDetectError, ValueError, RuntimeError) as e:
        print(f"❌ Error: {e}", file=sys.stderr)
        logger.error(f"Runtime error in {args.command}: {e}")
        return RUNTIME_ERROR


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
