#!/usr/bin/env python3
"""RF gesture domain adaptation -- thin entrypoint."""

import sys

from rfuda.main import main

if __name__ == "__main__":
    sys.exit(main())
