//! Session tokens for the core API: `uid.expiry.mac`, where mac is
//! HMAC-SHA256 over `uid.expiry`.

use chrono::{DateTime, Duration, TimeZone, Utc};
use hmac::{Hmac, Mac};
use sha2::Sha256;

use chips_core::workflow::UserId;

type HmacSha256 = Hmac<Sha256>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TokenError {
    Malformed,
    BadSignature,
    Expired,
}

#[derive(Clone)]
pub struct TokenSigner {
    key: Vec<u8>,
    ttl: Duration,
}

impl TokenSigner {
    pub fn new(key: impl Into<Vec<u8>>, ttl: Duration) -> Self {
        Self { key: key.into(), ttl }
    }

    fn mac(&self, body: &str) -> HmacSha256 {
        let mut m = HmacSha256::new_from_slice(&self.key).expect("hmac takes any key length");
        m.update(body.as_bytes());
        m
    }

    pub fn issue(&self, uid: UserId, now: DateTime<Utc>) -> (String, DateTime<Utc>) {
        let exp = now + self.ttl;
        let body = format!("{uid}.{}", exp.timestamp());
        let sig = hex::encode(self.mac(&body).finalize().into_bytes());
        (format!("{body}.{sig}"), exp)
    }

    pub fn verify(&self, token: &str, now: DateTime<Utc>) -> Result<UserId, TokenError> {
        let (body, sig) = token.rsplit_once('.').ok_or(TokenError::Malformed)?;
        let (uid, exp) = body.split_once('.').ok_or(TokenError::Malformed)?;
        let sig = hex::decode(sig).map_err(|_| TokenError::Malformed)?;
        self.mac(body)
            .verify_slice(&sig)
            .map_err(|_| TokenError::BadSignature)?;
        let uid: UserId = uid.parse().map_err(|_| TokenError::Malformed)?;
        let exp: i64 = exp.parse().map_err(|_| TokenError::Malformed)?;
        let exp = Utc.timestamp_opt(exp, 0).single().ok_or(TokenError::Malformed)?;
        if now >= exp {
            return Err(TokenError::Expired);
        }
        Ok(uid)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn issue_then_verify() {
        let s = TokenSigner::new("k", Duration::hours(1));
        let now = Utc::now();
        let (t, exp) = s.issue(42, now);
        assert_eq!(exp, now + Duration::hours(1));
        assert_eq!(s.verify(&t, now), Ok(42));
    }

    #[test]
    fn expired_and_tampered_tokens_rejected() {
        let s = TokenSigner::new("k", Duration::seconds(1));
        let now = Utc::now();
        let (t, _) = s.issue(7, now);
        assert_eq!(s.verify(&t, now + Duration::seconds(2)), Err(TokenError::Expired));
        let forged = t.replacen("7.", "8.", 1);
        assert_eq!(s.verify(&forged, now), Err(TokenError::BadSignature));
        let other = TokenSigner::new("other", Duration::hours(1));
        assert_eq!(other.verify(&t, now), Err(TokenError::BadSignature));
        assert_eq!(s.verify("garbage", now), Err(TokenError::Malformed));
    }
}
