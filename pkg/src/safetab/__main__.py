import sys

from safetab.cli import main

sys.exit(main())
