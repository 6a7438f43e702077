import os
import typing as t
from pathlib import Path

import psutil
import yaml

from .errors import ConfigError


BLAS_THREAD_VARS = ('OMP_NUM_THREADS', 'OPENBLAS_NUM_THREADS', 'MKL_NUM_THREADS')


def default_threads() -> int:
    return max(1, int(psutil.cpu_count() or 1))


def _flag_value(argv: t.Sequence[str], flag: str) -> t.Optional[str]:
    value = None
    for i, arg in enumerate(argv):
        if arg == flag and i + 1 < len(argv):
            value = argv[i + 1]
        elif arg.startswith(flag + '='):
            value = arg.split('=', 1)[1]
    return value


def _positive(value) -> t.Optional[int]:
    if value is None or not str(value).isdigit() or int(value) < 1:
        return None
    return int(value)


def requested_threads(argv: t.Sequence[str]) -> t.Optional[int]:
    """
    The thread count asked for by `--threads N`, or else by the `threads` key
    of the `--config` file. Anything unreadable is left for config validation
    to report.
    """
    flag = _positive(_flag_value(argv, '--threads'))
    if flag is not None:
        return flag

    config_path = _flag_value(argv, '--config')
    if not config_path:
        return None
    try:
        data = yaml.safe_load(Path(config_path).read_text())
    except (OSError, yaml.YAMLError):
        return None
    if isinstance(data, dict):
        return _positive(data.get('threads'))
    return None


def pin_blas_threads(argv: t.Sequence[str]) -> int:
    """
    Export the requested thread count to the BLAS thread-count variables.
    Must run before numpy is imported; BLAS reads these once. Without a
    request, variables already set in the environment are kept and the rest
    default to the CPU count.
    """
    count = requested_threads(argv)
    for var in BLAS_THREAD_VARS:
        if count is not None:
            os.environ[var] = str(count)
        else:
            os.environ.setdefault(var, str(default_threads()))
    return int(os.environ[BLAS_THREAD_VARS[0]])


def pinned_threads() -> t.Optional[int]:
    return _positive(os.environ.get(BLAS_THREAD_VARS[0]))


def parse_index_list(spec: t.Union[str, t.Sequence[int], None]) -> t.List[int]:
    """
    Parse a user-facing layer selection like "1,3,5-7" into sorted 1-based
    indices.
    """
    if spec is None or spec == '':
        return []
    if not isinstance(spec, str):
        return sorted(set(int(i) for i in spec))

    out: t.Set[int] = set()
    for part in spec.split(','):
        part = part.strip()
        if not part:
            continue
        try:
            if '-' in part:
                lo, hi = (int(i) for i in part.split('-', 1))
                out.update(range(lo, hi + 1))
            else:
                out.add(int(part))
        except ValueError:
            raise ConfigError(f"can't parse layer selection {spec!r}")

    if any(i < 1 for i in out):
        raise ConfigError(f"layer indices are 1-based; got {spec!r}")
    return sorted(out)
