"""Allow python -m pyautobid."""

import sys

from .cli import main

sys.exit(main())
