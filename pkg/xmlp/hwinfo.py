"""
Structured information on the hardware a run used, echoed next to the
results for provenance.
"""
import os
import platform
import socket
import subprocess
import typing as t

import distro
import numpy as np
import psutil

from .util import BLAS_THREAD_VARS

_SYS = platform.system()


def get_processor_name() -> str:
    if _SYS == "Darwin":
        os.environ['PATH'] += os.pathsep + '/usr/sbin'
        return subprocess.check_output(
            ["sysctl", "-n", "machdep.cpu.brand_string"]).decode().strip()
    elif _SYS == "Linux":
        with open('/proc/cpuinfo', 'r') as f:
            for line in f:
                if "model name" in line:
                    return line.split(':', 1)[-1].strip()
    return platform.processor()


def blas_threads() -> t.Dict[str, str]:
    return {
        var: os.environ[var]
        for var in BLAS_THREAD_VARS
        if var in os.environ
    }


def get_hwinfo() -> dict:
    return dict(
        hostname=socket.gethostname(),
        cpu_model_name=get_processor_name(),
        cpu_count=psutil.cpu_count(),
        cpu_count_physical=psutil.cpu_count(logical=False),
        ram_gb=(psutil.virtual_memory().total / (1024**3)),
        os=[distro.id(), distro.version(), distro.codename()],
        arch=platform.machine(),
        kernel=platform.uname().release,
        python=platform.python_version(),
        numpy=np.__version__,
        blas_threads=blas_threads(),
    )
