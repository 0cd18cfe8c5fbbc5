#include <stdio.h>
#include <stdlib.h>
#include "pcrp.h"

#define CHECK(call)                                                         \
    do {                                                                    \
        PcrpStatus s_ = (call);                                             \
        if (s_ != PCRP_STATUS_OK) {                                         \
            fprintf(stderr, "%s -> %d: %s\n", #call, (int)s_,               \
                    pcrp_last_error_message());                             \
            return 1;                                                       \
        }                                                                   \
    } while (0)

int main(int argc, char **argv) {
    if (argc < 2) return 2;
    PcrpDataset *raw = NULL, *ds = NULL;
    PcrpEncoder *enc = NULL;
    CHECK(pcrp_dataset_synth(6, 2, 8, 4, 0.01, 3, &raw));
    CHECK(pcrp_dataset_preprocess(raw, &ds));
    CHECK(pcrp_train(ds, "{\"t_fixed\": 8, \"hidden_dim\": 6, \"ks\": [2], \"r\": 2, \"pretrain_epochs\": 1}", argv[1], &enc));
    size_t n = pcrp_dataset_len(ds), c = pcrp_encoder_dim(enc);
    double *feats = malloc(n * c * sizeof(double));
    CHECK(pcrp_encoder_encode(enc, ds, feats, n * c));
    if (pcrp_encoder_encode(enc, ds, feats, 1) != PCRP_STATUS_BUFFER_TOO_SMALL) return 3;
    if (pcrp_last_error_message() == NULL) return 4;
    printf("%s %zu %zu %.6f\n", pcrp_version(), n, c, feats[0]);
    free(feats);
    pcrp_encoder_free(enc);
    pcrp_dataset_free(ds);
    pcrp_dataset_free(raw);
    return 0;
}
