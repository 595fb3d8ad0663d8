# %%
import sys

from blockquant.__main__ import main

sys.exit(main())
# %%
