import sys

from fracot.cli import main

sys.exit(main())
