# %%
import argparse
import logging
import sys

from blockquant.config import DEFAULT_CONFIG, load_config, resolve
from blockquant.pipeline import COMMANDS
from blockquant.utils import BlockQuantError

logger = logging.getLogger(__name__)


def _common(parser):
    parser.add_argument("--profile", choices=["desk", "paper"], help="iteration and learning rate preset")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--out", type=str, help="output directory")
    parser.add_argument("--workers", type=int, help="threads for batch, measurement and oracle fan-out")


def _recon_flags(parser):
    parser.add_argument("--bits", type=int, help="weight bitwidth")
    parser.add_argument("--act-bits", type=int, help="activation bitwidth, enables activation quantization")
    parser.add_argument("--act-placement", choices=["block", "layer"])
    parser.add_argument("--first-last-bits", choices=["2", "3", "4", "8", "follow"])
    parser.add_argument("--granularity", choices=["layer", "block", "stage", "net"])
    parser.add_argument("--iters", type=int)
    parser.add_argument("--batch-size", type=int)
    parser.add_argument("--lr-round", type=float)
    parser.add_argument("--lr-step", type=float)
    parser.add_argument("--reg-weight", type=float)
    parser.add_argument("--rounding", choices=["adaround", "nearest"])
    parser.add_argument("--objective", choices=["fim", "mse"])
    parser.add_argument("--propagate", choices=["quantized", "fp"])
    parser.add_argument("--per-channel", action="store_true", default=None)
    parser.add_argument("--normalize-grads", action="store_true", default=None,
                        help="rescale cached gradients to unit mean square per unit, shifting their weight against --reg-weight")
    parser.add_argument("--calib-size", type=int)
    parser.add_argument("--log-every", type=int)


def build_parser():
    parser = argparse.ArgumentParser(prog="blockquant", description="post-training quantization by block reconstruction")
    parser.add_argument("-c", "--config-file", type=str, default=None,
                        help="The config file (default {})".format(DEFAULT_CONFIG))
    sub = parser.add_subparsers(dest="command", required=True)

    calibrate = sub.add_parser("calibrate", help="calibrate a model on a calibration set")
    calibrate.add_argument("--model", type=str)
    calibrate.add_argument("--calib", type=str)
    calibrate.add_argument("--test", type=str, help="labelled set for the accuracy report")
    calibrate.add_argument("--sensitivity", dest="measure_sensitivity", action="store_true", default=None,
                           help="also calibrate at 2, 4 and 8 bits and write the sensitivity table")
    calibrate.add_argument("--bit-config", type=str, help="per-layer bits from a search result")
    _recon_flags(calibrate)
    _common(calibrate)

    search = sub.add_parser("search", help="search a mixed precision bit configuration")
    search.add_argument("--sensitivity", type=str)
    search.add_argument("--hardware", type=str)
    search.add_argument("--delta", type=float, help="hardware budget")
    search.add_argument("--population", type=int)
    search.add_argument("--generations", type=int)
    search.add_argument("--mutation", type=float)
    search.add_argument("--topk", type=int)
    search.add_argument("--act-bits", type=int)
    _common(search)

    evaluate = sub.add_parser("eval", help="accuracy, loss and size of a model")
    evaluate.add_argument("--model", type=str)
    evaluate.add_argument("--data", type=str)
    _common(evaluate)

    verify = sub.add_parser("verify", help="check the output-space quadratic form on a tiny model")
    verify.add_argument("--model", type=str)
    verify.add_argument("--data", type=str)
    verify.add_argument("--targets", choices=["model", "labels"])
    verify.add_argument("--epsilons", type=float, nargs="+")
    verify.add_argument("--verify-samples", type=int)
    verify.add_argument("--margin", type=float)
    _common(verify)

    ablate = sub.add_parser("ablate", help="compare reconstruction granularities")
    ablate.add_argument("--model", type=str)
    ablate.add_argument("--calib", type=str)
    ablate.add_argument("--test", type=str)
    ablate.add_argument("--granularities", nargs="+", choices=["layer", "block", "stage", "net"])
    _recon_flags(ablate)
    _common(ablate)

    fixtures = sub.add_parser("make-fixtures", help="write toy models and synthetic datasets")
    _common(fixtures)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)

    # getting ready
    logging.basicConfig(format='%(asctime)s %(name)-12s %(levelname)-8s %(message)s',
                        datefmt='%m-%d %H:%M:%S')
    flags = vars(args)
    config_file = flags.pop("config_file")
    command = flags.pop("command")
    try:
        file_config = load_config(config_file or DEFAULT_CONFIG, explicit=config_file is not None)
        level = file_config.get("logger", {}).get("level", "info")
        logging.getLogger().setLevel(level.upper())
        run = resolve(command, flags, file_config)
        return COMMANDS[command](run)
    except BlockQuantError as e:
        logger.error('%s', e)
        return e.exit_code


if __name__ == '__main__':
    sys.exit(main())
