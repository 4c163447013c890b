import os
import random
import logging
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from dotenv import load_dotenv

# Load environment variables
load_dotenv()

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
LOG_FILENAME = 'fiberdetect.log'


def data_root() -> Path:
    """Default directory used to resolve relative manifest paths."""
    return Path(os.getenv('FIBERDETECT_DATA_ROOT', '.')).expanduser()


def default_device() -> torch.device:
    name = os.getenv('FIBERDETECT_DEVICE', 'cpu')
    if name.startswith('cuda') and not torch.cuda.is_available():
        logging.getLogger(__name__).warning("CUDA requested but unavailable, using cpu")
        name = 'cpu'
    return torch.device(name)


def setup_logging(log_dir: Optional[Path] = None, level: Optional[str] = None) -> None:
    """Configure root logging with a file handler in ``log_dir`` and a stream handler."""
    level_name = (level or os.getenv('FIBERDETECT_LOG_LEVEL', 'INFO')).upper()
    handlers = [logging.StreamHandler()]
    if log_dir is not None:
        log_dir = Path(log_dir)
        log_dir.mkdir(parents=True, exist_ok=True)
        handlers.insert(0, logging.FileHandler(log_dir / LOG_FILENAME, encoding='utf-8'))

    logging.basicConfig(
        level=getattr(logging, level_name, logging.INFO),
        format=LOG_FORMAT,
        handlers=handlers,
        force=True,
    )


def seed_everything(seed: int, deterministic: bool = False) -> np.random.Generator:
    """Seed python, numpy and torch from one integer and return a numpy generator."""
    random.seed(seed)
    np.random.seed(seed % (2 ** 32))
    torch.manual_seed(seed)
    if deterministic:
        os.environ.setdefault('CUBLAS_WORKSPACE_CONFIG', ':4096:8')
        torch.use_deterministic_algorithms(True, warn_only=True)
        torch.backends.cudnn.benchmark = False
    return np.random.default_rng(seed)
