import sys

from beqkit.cli import main

sys.exit(main())
