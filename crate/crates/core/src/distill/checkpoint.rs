//! Pretraining checkpoint: an encoder section holding the student, followed
//! by tagged sections `HEAD` (student head), `TCHR` (teacher encoder),
//! `THED` (teacher head) and `CNTR` (u32 K and K f64 center values).
//! A file holding only the encoder section is also accepted.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::Array1;

use super::train::DistillState;
use crate::bytes::Reader;
use crate::encoder::{read_section, read_tensors, write_encoder_to, write_tensors, Encoder, EncoderConfig, Params};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct DistillParts {
    pub student_head: Params,
    pub teacher: Params,
    pub teacher_head: Params,
    pub center: Array1<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub encoder: EncoderConfig,
    pub student: Params,
    pub distill: Option<DistillParts>,
}

impl Checkpoint {
    pub fn from_state(state: &DistillState) -> Self {
        Checkpoint {
            encoder: state.config.encoder.clone(),
            student: state.student.clone(),
            distill: Some(DistillParts {
                student_head: state.student_head.clone(),
                teacher: state.teacher.clone(),
                teacher_head: state.teacher_head.clone(),
                center: state.center.clone(),
            }),
        }
    }

    /// Parameters used for feature extraction: the teacher when present.
    pub fn eval_params(&self) -> &Params {
        self.distill.as_ref().map_or(&self.student, |d| &d.teacher)
    }
}

pub fn write_checkpoint(ck: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint_to(ck, &mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn write_checkpoint_to(ck: &Checkpoint, out: &mut impl Write) -> Result<()> {
    let mut buf = Vec::new();
    write_encoder_to(&ck.encoder, &ck.student, &mut buf)?;
    if let Some(d) = &ck.distill {
        for (tag, p) in [(b"HEAD", &d.student_head), (b"TCHR", &d.teacher), (b"THED", &d.teacher_head)] {
            buf.extend_from_slice(tag);
            write_tensors(&mut buf, p)?;
        }
        buf.extend_from_slice(b"CNTR");
        buf.extend_from_slice(&(d.center.len() as u32).to_le_bytes());
        for v in &d.center {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.write_all(&buf)?;
    Ok(())
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    read_checkpoint_from(&fs::read(path)?)
}

fn expect_tag(r: &mut Reader, tag: &[u8; 4]) -> Result<()> {
    let at = r.pos;
    if r.take(4)? != tag {
        return Err(Error::parse(at, format!("expected section {}", String::from_utf8_lossy(tag))));
    }
    Ok(())
}

pub fn read_checkpoint_from(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader::new(bytes, 0);
    let (encoder, student) = read_section(&mut r)?;
    if r.pos == bytes.len() {
        return Ok(Checkpoint {
            encoder,
            student,
            distill: None,
        });
    }
    expect_tag(&mut r, b"HEAD")?;
    let student_head = read_tensors(&mut r)?;
    expect_tag(&mut r, b"TCHR")?;
    let teacher = read_tensors(&mut r)?;
    expect_tag(&mut r, b"THED")?;
    let teacher_head = read_tensors(&mut r)?;
    expect_tag(&mut r, b"CNTR")?;
    let k = r.u32()? as usize;
    let center = (0..k).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
    r.finish()?;
    Encoder::new(encoder.clone())?.check_params(&teacher)?;
    if !student_head.same_shapes(&teacher_head) || student_head.tensors.len() != 2 || student_head.tensors[1].len() != k {
        return Err(Error::Shape("projection heads do not match the center".into()));
    }
    Ok(Checkpoint {
        encoder,
        student,
        distill: Some(DistillParts {
            student_head,
            teacher,
            teacher_head,
            center: Array1::from_vec(center),
        }),
    })
}
