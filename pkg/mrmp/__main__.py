import sys

from mrmp.cli import main

sys.exit(main())
