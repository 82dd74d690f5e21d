#!/usr/bin/env python3
"""
Main Application Entry Point
Command-line interface `stflow` for the frame-event flow toolkit
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

# Add the project root to Python path
project_root = Path(__file__).parent.parent
sys.path.insert(0, str(project_root))

from src.config.app_config import (  # noqa: E402
    PipelineConfig,
    load_pipeline_config,
    parse_set_overrides,
    settings,
)
from src.core.errors import ConfigError, StageError, StflowError  # noqa: E402


def setup_logging():
    """Configure application logging"""
    log_level = getattr(logging, settings.log_level.upper(), logging.INFO)

    handlers = [logging.StreamHandler(sys.stdout)]
    if settings.log_to_file:
        handlers.append(logging.FileHandler('stflow.log'))

    logging.basicConfig(
        level=log_level,
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        handlers=handlers
    )

    # Per-iteration chatter stays at INFO unless LOG_LEVEL asks for more
    if log_level > logging.DEBUG:
        logging.getLogger('src.services.fusion').setLevel(logging.INFO)
        logging.getLogger('src.services.optim').setLevel(logging.INFO)


def check_environment():
    """Report the runtime settings read from the environment"""
    logger = logging.getLogger(__name__)
    logger.info("Environment validation completed")
    logger.info(f"Worker threads: {settings.worker_count} (STFLOW_THREADS={settings.threads})")
    logger.info(f"Log to file: {settings.log_to_file}")


def _int_list(raw: str) -> List[int]:
    try:
        values = [int(part) for part in raw.split(',') if part.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma separated integers, got {raw!r}")
    if not values or min(values) < 1:
        raise argparse.ArgumentTypeError("blur lengths must be >= 1")
    return values


def build_parser() -> argparse.ArgumentParser:
    """Argument parser with one subcommand per pipeline stage"""
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', '--spec', dest='config', type=Path, help='"key = value" config file')
    common.add_argument('--seed', type=int, help='random seed (overrides the config)')
    common.add_argument('--out', help='output directory (viz: output PNG path)')
    common.add_argument('--set', dest='overrides', action='append', default=[], metavar='KEY=VALUE',
                        help='override one config key; repeatable')
    common.add_argument('--input', help='bundle directory to load instead of synthesizing')

    parser = argparse.ArgumentParser(prog='stflow', description='Frame-event spatiotemporal flow toolkit')
    sub = parser.add_subparsers(dest='command', required=True)

    sub.add_parser('synth', parents=[common], help='generate a synthetic scene bundle')
    gradients = sub.add_parser('gradients', parents=[common], help='temporal gradient maps and histograms')
    gradients.add_argument('--sweep-blur', type=_int_list, help='blur lengths for the KL sweep, e.g. 8,4,1')
    sub.add_parser('boundary', parents=[common], help='boundary maps and reference template')
    fuse = sub.add_parser('fuse', parents=[common], help='correlation fusion and per-slice flows')
    fuse.add_argument('--init-flow', type=Path, help='initial flow raster (skips refinement)')
    fuse.add_argument('--template', type=Path, help='template CSV from `stflow boundary`')
    sub.add_parser('refine', parents=[common], help='photometric refinement of the frame flow')
    gradcheck = sub.add_parser('gradcheck', parents=[common], help='finite-difference gradient check')
    gradcheck.add_argument('--instances', type=int, default=1, help='number of random instances')
    evaluate = sub.add_parser('eval', parents=[common], help='EPE / F1-all of a flow raster')
    evaluate.add_argument('--pred', type=Path, required=True)
    evaluate.add_argument('--gt', type=Path, required=True)
    evaluate.add_argument('--mask', type=Path)
    viz = sub.add_parser('viz', parents=[common], help='colour-wheel rendering of a flow raster')
    viz.add_argument('--flow', type=Path, required=True)
    viz.add_argument('--max-mag', type=float, default=None, help='magnitude at full saturation')
    run = sub.add_parser('run', parents=[common], help='full pipeline with metrics')
    run.add_argument('--ablations', action='store_true', help='also write ablation.csv')
    return parser


def _load_config(args: argparse.Namespace) -> PipelineConfig:
    overrides = parse_set_overrides(args.overrides)
    if args.input:
        overrides['input'] = args.input
    if getattr(args, 'ablations', False):
        overrides['ablations'] = 'true'
    return load_pipeline_config(args.config, overrides, args.seed, args.out)


def dispatch(args: argparse.Namespace) -> None:
    """Run one subcommand and print its result line"""
    from src.adapters.dependencies import get_pipeline_service
    from src.services.tabular_processor import TabularProcessor

    service = get_pipeline_service()
    command = args.command

    if command == 'eval':
        print(TabularProcessor.metrics_line(service.evaluate(args.pred, args.gt, args.mask)))
        return
    if command == 'viz':
        if not args.out:
            raise ConfigError('out', 'viz needs --out <png path>')
        print(service.visualize(args.flow, args.max_mag, Path(args.out)))
        return
    if command == 'gradcheck' and args.instances < 1:
        raise ConfigError('instances', 'must be >= 1')

    config = _load_config(args)
    if command == 'synth':
        print(service.synth(config))
    elif command == 'gradients':
        print(service.gradients(config, args.sweep_blur))
    elif command == 'boundary':
        print(service.boundary(config))
    elif command == 'refine':
        print(service.refine(config))
    elif command == 'fuse':
        print(service.fuse(config, args.init_flow, args.template))
    elif command == 'gradcheck':
        print(f"{service.gradcheck(config, args.instances):.6e}")
    elif command == 'run':
        print(TabularProcessor.metrics_line(service.run_pipeline(config)))


def main(argv: Optional[List[str]] = None) -> int:
    """Main application entry point"""
    setup_logging()
    logger = logging.getLogger(__name__)

    parser = build_parser()
    args = parser.parse_args(argv)
    logger.info(f"stflow {args.command}")
    check_environment()

    try:
        dispatch(args)
    except ConfigError as e:
        logger.error(f"Configuration error: {e}")
        print(f"stflow: config: {e}", file=sys.stderr)
        return 2
    except StageError as e:
        logger.error(f"Stage {e.stage} failed: {e.cause}")
        print(f"stflow: stage {e.stage}: {e.cause}", file=sys.stderr)
        return 1
    except StflowError as e:
        logger.error(f"{args.command} failed: {e}")
        print(f"stflow: stage {args.command}: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
