"""Jump processes, hitting regions, generalized hitting times and path
simulation."""

from .ght import *  # noqa: F401,F403
from .processes import *  # noqa: F401,F403
from .regions import *  # noqa: F401,F403
from .simulate import *  # noqa: F401,F403
from . import ght, processes, regions, simulate

__all__ = ght.__all__ + processes.__all__ + regions.__all__ + simulate.__all__
