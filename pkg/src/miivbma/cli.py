import typer

import miivbma.fit
import miivbma.miiv
import miivbma.parser
import miivbma.simulation

app = typer.Typer(pretty_exceptions_show_locals=False)
app.add_typer(miivbma.fit.app)
app.add_typer(miivbma.miiv.app)
app.add_typer(miivbma.parser.app)
app.add_typer(miivbma.simulation.app)

if __name__ == "__main__":
    app()
