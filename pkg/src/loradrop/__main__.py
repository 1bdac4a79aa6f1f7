from loradrop.cli import main
import sys

sys.exit(main())
