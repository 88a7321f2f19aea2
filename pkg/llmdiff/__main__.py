import sys

from llmdiff.cli import main

sys.exit(main())
