import sys

from wirelessfedft.cli import main

sys.exit(main())
