# Builds the results archive schema in DATABASE_URL
from dotenv import load_dotenv
load_dotenv()

import utils

utils.init_db()
print("Schema created.")
