#pragma once

#include <cstdio>
#include <fstream>
#include <iterator>
#include <string>

#include <openssl/evp.h>

#include "ptgcn/errors.hpp"

namespace ptgcn {

/// Hex SHA-1 of "blob <size>\0<content>", the id git gives the file.
inline std::string git_blob_id(const std::string &path) {
  std::ifstream in(path, std::ios::binary);
  if (!in)
    throw LookupError("cannot open '" + path + "' for hashing");
  std::string content((std::istreambuf_iterator<char>(in)),
                      std::istreambuf_iterator<char>());
  std::string header = "blob " + std::to_string(content.size());
  header.push_back('\0');

  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_MD_CTX *ctx = EVP_MD_CTX_new();
  EVP_DigestInit_ex(ctx, EVP_sha1(), nullptr);
  EVP_DigestUpdate(ctx, header.data(), header.size());
  EVP_DigestUpdate(ctx, content.data(), content.size());
  EVP_DigestFinal_ex(ctx, digest, &len);
  EVP_MD_CTX_free(ctx);

  std::string hex;
  char buf[3];
  for (unsigned int i = 0; i < len; ++i) {
    std::snprintf(buf, sizeof buf, "%02x", digest[i]);
    hex += buf;
  }
  return hex;
}

} // namespace ptgcn
