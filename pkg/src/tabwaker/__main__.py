import sys

from tabwaker.cli import main

sys.exit(main())
