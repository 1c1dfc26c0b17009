//! Rule-based decomposition of namespaced codes into tokens.

use super::TokenizeError;

pub const SEP: &str = "//";

pub const TIMELINE_END: &str = "TIMELINE_END";
pub const UNKNOWN: &str = "UNKNOWN";
pub const MEDS_DEATH: &str = "MEDS_DEATH";
pub const MEDS_BIRTH: &str = "MEDS_BIRTH";
pub const HOSPITAL_ADMISSION: &str = "HOSPITAL_ADMISSION";
pub const HOSPITAL_DISCHARGE: &str = "HOSPITAL_DISCHARGE";
pub const ICU_ADMISSION: &str = "ICU_ADMISSION";
pub const ICU_DISCHARGE: &str = "ICU_DISCHARGE";
pub const ED_REGISTRATION: &str = "ED_REGISTRATION";
pub const ED_OUT: &str = "ED_OUT";

pub const ICD_PCS: &str = "ICD_PCS";
pub const ICD_CM: &str = "ICD_CM";
pub const ATC: &str = "ATC";
pub const ATC_4: &str = "ATC_4";
pub const ATC_SFX: &str = "ATC_SFX";

/// ICD-10-CM codes keep this many characters.
pub const ICD_CM_CHARS: usize = 4;
/// Shorter fallback used when the truncated code was never seen in training.
pub const ICD_CM_FALLBACK_CHARS: usize = 3;

/// Splits `NAMESPACE//rest` into its parts; codes without a separator have no namespace.
pub fn namespace(code: &str) -> (Option<&str>, &str) {
    match code.split_once(SEP) {
        Some((ns, rest)) => (Some(ns), rest),
        None => (None, code),
    }
}

pub fn token(ns: &str, body: &str) -> String {
    format!("{ns}{SEP}{body}")
}

fn take_chars(s: &str, n: usize) -> &str {
    match s.char_indices().nth(n) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}

/// Truncated ICD-10-CM token at the given granularity.
pub fn icd_cm_token(body: &str, chars: usize) -> String {
    token(ICD_CM, take_chars(body, chars))
}

/// Tokens for one code, without any quantile payload.
///
/// ICD-10-PCS codes become seven single-character tokens, ATC codes split into
/// class / fourth character / suffix, ICD-10-CM codes are truncated, and every
/// other code is a single categorical token.
pub fn decompose_code(code: &str) -> Result<Vec<String>, TokenizeError> {
    let (ns, body) = namespace(code);
    match ns {
        Some(ICD_PCS) => {
            let chars: Vec<char> = body.chars().collect();
            if chars.len() != 7 {
                return Err(TokenizeError::MalformedPcs(code.to_string()));
            }
            Ok(chars.iter().map(|c| token(ICD_PCS, &c.to_string())).collect())
        }
        Some(ATC) => {
            let chars: Vec<char> = body.chars().collect();
            let mut out = vec![token(ATC, &chars.iter().take(3).collect::<String>())];
            if chars.len() > 3 {
                out.push(token(ATC_4, &chars[3].to_string()));
            }
            if chars.len() > 4 {
                out.push(token(ATC_SFX, &chars[4..].iter().collect::<String>()));
            }
            Ok(out)
        }
        Some(ICD_CM) => Ok(vec![icd_cm_token(body, ICD_CM_CHARS)]),
        _ => Ok(vec![code.to_string()]),
    }
}

/// Group label of a token: the namespace for `NS//...` tokens, `interval` for
/// time-interval tokens and the token itself otherwise (markers, `Q1`..`Q10`).
pub fn group_of(token: &str) -> String {
    if super::intervals::is_interval_token(token) {
        return "interval".to_string();
    }
    match namespace(token) {
        (Some(ns), _) => ns.to_string(),
        (None, t) => t.to_string(),
    }
}

/// Per-group placeholder for codes unseen in training.
pub fn unknown_token(group: &str) -> String {
    token(group, "UNK")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pcs_is_seven_tokens() {
        let toks = decompose_code("ICD_PCS//0BH17EZ").unwrap();
        let chars: Vec<&str> = toks.iter().map(|t| namespace(t).1).collect();
        assert_eq!(chars, ["0", "B", "H", "1", "7", "E", "Z"]);
        assert!(toks.iter().all(|t| group_of(t) == ICD_PCS));
        assert!(matches!(
            decompose_code("ICD_PCS//0BH17E"),
            Err(TokenizeError::MalformedPcs(_))
        ));
    }

    #[test]
    fn atc_three_way_split() {
        assert_eq!(
            decompose_code("ATC//C09AA05").unwrap(),
            ["ATC//C09", "ATC_4//A", "ATC_SFX//A05"]
        );
        assert_eq!(decompose_code("ATC//C09").unwrap(), ["ATC//C09"]);
    }

    #[test]
    fn icd_cm_truncates() {
        assert_eq!(decompose_code("ICD_CM//I5033").unwrap(), ["ICD_CM//I503"]);
        assert_eq!(decompose_code("ICD_CM//I10").unwrap(), ["ICD_CM//I10"]);
    }

    #[test]
    fn other_codes_are_single_tokens() {
        assert_eq!(decompose_code("LAB//51221//%").unwrap(), ["LAB//51221//%"]);
        assert_eq!(decompose_code("HOSPITAL_ADMISSION").unwrap(), ["HOSPITAL_ADMISSION"]);
    }

    #[test]
    fn groups() {
        assert_eq!(group_of("LAB//51221//%"), "LAB");
        assert_eq!(group_of("15m-45m"), "interval");
        assert_eq!(group_of("Q7"), "Q7");
        assert_eq!(group_of("MEDS_DEATH"), "MEDS_DEATH");
        assert_eq!(group_of("ATC_SFX//A05"), "ATC_SFX");
    }
}
