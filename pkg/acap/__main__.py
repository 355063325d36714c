# Copyright (c) ACAP contributors.
# Licensed under the MIT License.

import sys

from acap.cli import main

sys.exit(main())
