import sys

from flatnmpc.cli import main

sys.exit(main())
