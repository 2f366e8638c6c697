import logging
from importlib.metadata import PackageNotFoundError
from importlib.metadata import version as imp_version
from pathlib import Path
from typing import Optional, Union

import protofed.protofed_types as internal
from .Tensor import set_precision
from .protofed_types import Precision

_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def init(global_loglevel: Union[int, str] = logging.INFO,
         logfile_name: Optional[str] = None,
         precision: Union[Precision, str] = Precision.Double):
    if isinstance(global_loglevel, str):
        # also support string as input argument
        global_loglevel = internal.__strToLogLevel__[global_loglevel]

    handlers = [logging.FileHandler(logfile_name)] if logfile_name else None
    logging.basicConfig(level=global_loglevel, format=_FORMAT,
                        handlers=handlers, force=True)
    set_precision(precision)


def version() -> str:
    try:
        return imp_version("protofed")
    except PackageNotFoundError:
        return "0+unknown"


def wrapper_version() -> str:
    git_hash = ""
    hash_file = Path(__file__).parent.parent / "git-hash.txt"
    if hash_file.exists():
        with open(hash_file, "r") as f:
            git_hash = f.readline()
    return f"{version()} {git_hash}".strip()


def set_log_level(lvl: Union[int, str]):
    if isinstance(lvl, str):
        # also support string as input argument
        lvl = internal.__strToLogLevel__[lvl]

    logging.basicConfig(level=lvl)
    logging.getLogger().setLevel(lvl)
