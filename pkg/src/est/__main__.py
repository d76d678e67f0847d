import sys

from est.cli import main

sys.exit(main())
