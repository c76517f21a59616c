from featdesc.main import app

app(prog_name="featdesc")
