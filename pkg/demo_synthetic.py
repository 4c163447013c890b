#!/usr/bin/env python3
"""
Demo script: the synthetic experiment end to end.

synth -> train -> infer -> eval (raw) -> filter -> eval (filtered) -> froc

    python demo_synthetic.py --out runs/demo             # tiny smoke run
    python demo_synthetic.py --out runs/desk --desk-scale
"""

import argparse
import json
import sys
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List

from dotenv import load_dotenv

from main import run
from tools.synth_generator import SYNTH_PAIR_OFFSET_UM

load_dotenv()

# 55 sections: 5 charted + 40 unlabeled for training, 10 held out
DESK_SCALE_CONFIG: Dict[str, Any] = {
    'sections': {
        'train': {
            'pretrain_epochs': 20,
            'te_epochs': 20,
            'patience': 20,
            'unet': {'base_width': 16},
            'pair': {'max_crop_offset_um': SYNTH_PAIR_OFFSET_UM},
        },
    },
}


def print_banner(desk_scale: bool):
    banner = """
    ╔══════════════════════════════════════════════════════════════╗
    ║            Fiber Bundle Detection: Synthetic Demo            ║
    ╚══════════════════════════════════════════════════════════════╝
    """
    print(banner)
    print(f"🕐 Demo started at: {datetime.now().strftime('%Y-%m-%d %H:%M:%S')}")
    print(f"📐 Scale: {'desk-scale experiment' if desk_scale else 'tiny smoke run'}")
    print("=" * 70)


def step(number: int, title: str, argv: List[str]) -> None:
    print(f"\n🔧 STEP {number}: {title}")
    print("-" * 40)
    code = run(argv)
    if code != 0:
        raise RuntimeError(f"step '{title}' failed with exit code {code}")


def load_metrics(path: Path) -> Dict[str, Any]:
    with open(path, 'r', encoding='utf-8') as f:
        return json.load(f)


def print_summary(out: Path):
    raw = load_metrics(out / 'eval_raw' / 'metrics.json')
    filtered = load_metrics(out / 'eval_filtered' / 'metrics.json')

    def fmt(value):
        return 'n/a' if value is None else f'{value:.3f}'

    print("\n" + "=" * 70)
    print("🎉 DEMO COMPLETED SUCCESSFULLY!")
    print("=" * 70)
    print(f"\n{'':<22}{'raw':>10}{'filtered':>12}")
    for key in ('tpr_dense', 'tpr_moderate', 'fp_avg'):
        print(f"   {key:<19}{fmt(raw[key]):>10}{fmt(filtered[key]):>12}")
    if raw['fp_avg'] > 0:
        reduction = 1.0 - filtered['fp_avg'] / raw['fp_avg']
        print(f"\n📉 FP_avg reduction from filtering: {reduction:.0%}")

    print("\n📚 Outputs:")
    for name in ('data', 'train', 'infer', 'filtered', 'eval_raw', 'eval_filtered', 'froc'):
        print(f"   📁 {out / name}")
    print(f"\n🕐 Demo completed at: {datetime.now().strftime('%Y-%m-%d %H:%M:%S')}")


def main():
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument('--out', type=Path, default=Path('runs/demo'))
    parser.add_argument('--desk-scale', action='store_true')
    parser.add_argument('--seed', type=int, default=0)
    args = parser.parse_args()

    out = args.out
    seed = ['--seed', str(args.seed)]
    scale: List[str] = ['--tiny']
    if args.desk_scale:
        out.mkdir(parents=True, exist_ok=True)
        config_path = out / 'desk_config.json'
        with open(config_path, 'w', encoding='utf-8') as f:
            json.dump(DESK_SCALE_CONFIG, f, indent=2)
        scale = ['--config', str(config_path)]

    try:
        print_banner(args.desk_scale)
        data = out / 'data'
        step(1, 'Generate synthetic stack', ['synth', '--out', str(data), *seed, *scale])
        step(2, 'Pretraining + temporal ensembling',
             ['train', '--manifest', str(data), '--out', str(out / 'train'), *seed, *scale])
        step(3, 'Whole-section inference',
             ['infer', '--checkpoint', str(out / 'train' / 'model.ckpt'), '--manifest', str(data),
              '--out', str(out / 'infer'), *seed])
        step(4, 'Evaluate raw detections',
             ['eval', '--pred', str(out / 'infer'), '--prob', str(out / 'infer'), '--manifest', str(data),
              '--out', str(out / 'eval_raw')])
        step(5, 'Continuity filter (oracle prior) + postprocessing',
             ['filter', '--detections', str(out / 'infer'), '--manifest', str(data),
              '--out', str(out / 'filtered'), '--oracle-prior'])
        step(6, 'Evaluate filtered detections',
             ['eval', '--pred', str(out / 'filtered'), '--manifest', str(data), '--out', str(out / 'eval_filtered')])
        step(7, 'FROC analysis',
             ['froc', '--prob', str(out / 'infer'), '--manifest', str(data), '--out', str(out / 'froc')])
        print_summary(out)
    except KeyboardInterrupt:
        print("\n\n⚠️ Demo interrupted by user")
        print(f"📋 Partial results may be available in {out}")
        sys.exit(1)
    except RuntimeError as e:
        print(f"\n❌ Demo error: {e}")
        print(f"🔧 See {out}/*/fiberdetect.log for details")
        sys.exit(1)


if __name__ == "__main__":
    main()
