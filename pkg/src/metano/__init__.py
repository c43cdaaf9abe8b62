"""Meta-learned implicit Fourier neural operators for few-shot PDE operator regression."""
from metano.autodiff import ALL_GROUPS, Group, Tape, grad_check
from metano.grid import Field, Grid, Spectrum, dft_forward, dft_inverse, relative_l2_error
from metano.ifno import IFNOModel, forward, init_model
from metano.kernels import BACKEND
from metano.tasks import Family, TaskDataset, TaskSpec, build_task_dataset, make_task
from metano.train import TrainConfig, train_loop

__version__ = "0.1.0"

__all__ = [
    "ALL_GROUPS", "BACKEND", "Family", "Field", "Grid", "Group", "IFNOModel", "Spectrum", "Tape",
    "TaskDataset", "TaskSpec", "TrainConfig", "build_task_dataset", "dft_forward", "dft_inverse",
    "forward", "grad_check", "init_model", "make_task", "relative_l2_error", "train_loop",
]
