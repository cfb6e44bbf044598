//! Line-based annotator for a terminal or a pipe.

use std::io::{self, BufRead, Write};

use claimsect::annotation::{AnnotationItem, Annotator, Answer, CampaignError};

pub struct TerminalAnnotator<R, W> {
    input: R,
    output: W,
    last_claim: Option<String>,
}

impl TerminalAnnotator<io::StdinLock<'static>, io::Stdout> {
    pub fn stdio() -> Self {
        TerminalAnnotator::new(io::stdin().lock(), io::stdout())
    }
}

impl<R: BufRead, W: Write> TerminalAnnotator<R, W> {
    pub fn new(input: R, output: W) -> Self {
        TerminalAnnotator {
            input,
            output,
            last_claim: None,
        }
    }

    fn show(&mut self, item: &AnnotationItem<'_>) -> io::Result<()> {
        let out = &mut self.output;
        if self.last_claim.as_deref() != Some(item.claim.claim_id.as_str()) {
            writeln!(
                out,
                "\n== claim {}: {}",
                item.claim.claim_id, item.claim.text
            )?;
            self.last_claim = Some(item.claim.claim_id.clone());
        }
        writeln!(
            out,
            "step {} | median {:.4} | ci width {:.4}",
            item.step, item.median, item.ci_width
        )?;
        writeln!(out, "doc {} score={:.6}", item.doc_id, item.score)?;
        if let Some(text) = item.doc_text {
            writeln!(out, "  {}", text.trim())?;
        }
        Ok(())
    }
}

fn parse(line: &str) -> Option<Answer> {
    match line.trim().to_ascii_lowercase().as_str() {
        "y" | "yes" => Some(Answer::Entails(true)),
        "n" | "no" => Some(Answer::Entails(false)),
        "u" | "undo" => Some(Answer::Undo),
        "q" | "quit" => Some(Answer::Quit),
        _ => None,
    }
}

impl<R: BufRead, W: Write> Annotator for TerminalAnnotator<R, W> {
    fn answer(&mut self, item: &AnnotationItem<'_>) -> Result<Answer, CampaignError> {
        let term = |e: io::Error| CampaignError::Annotator(e.to_string());
        self.show(item).map_err(term)?;
        loop {
            write!(
                self.output,
                "does the document entail the claim? [y/n/u/q] "
            )
            .map_err(term)?;
            self.output.flush().map_err(term)?;
            let mut line = String::new();
            if self.input.read_line(&mut line).map_err(term)? == 0 {
                writeln!(self.output).map_err(term)?;
                return Ok(Answer::Quit);
            }
            match parse(&line) {
                Some(a) => return Ok(a),
                None => writeln!(self.output, "please answer y, n, u or q").map_err(term)?,
            }
        }
    }

    fn notice(&mut self, message: &str) {
        let _ = writeln!(self.output, "{message}");
    }
}
