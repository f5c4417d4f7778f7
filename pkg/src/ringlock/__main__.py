import sys

from ringlock.cli import main

sys.exit(main())
